"""Panel data model: CSV ingestion, validation, rank normalization.

A panel holds excess returns R (N x T, column t is the return realized over
period t -> t+1) and one N x L characteristic matrix per period, observed at
the period start. Panels are balanced and immutable after load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import (
    MissingColumn,
    NonPositiveWeight,
    RankDeficientCharacteristics,
    UnbalancedPanel,
)

logger = logging.getLogger(__name__)

# Relative smallest-eigenvalue threshold for the per-period Gram matrices.
GRAM_EIG_TOL = 1e-10


@dataclass(frozen=True)
class PanelSchema:
    """Column naming and missing-data policy for the long CSV format."""

    asset_col: str = "asset_id"
    period_col: str = "period"
    return_col: str = "ret"
    char_cols: tuple = ()  # empty means: every column after the first three, in order
    missing_policy: str = "drop-asset"  # drop-asset | error
    period_format: str | None = None  # strptime format; None sorts labels lexicographically
    ties: str = "ordinal"  # ordinal | average (rank normalization)


@dataclass(frozen=True)
class Panel:
    returns: np.ndarray  # (N, T)
    characteristics: list  # T matrices, each (N, L)
    asset_ids: list
    period_labels: list
    has_constant: bool = False
    char_names: tuple = ()  # optional, length L when present

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def t(self) -> int:
        return self.returns.shape[1]

    @property
    def l(self) -> int:
        return self.characteristics[0].shape[1]


def validate_panel(panel: Panel) -> None:
    """Check shape consistency and per-period Gram invertibility."""
    n, t = panel.returns.shape
    if len(panel.characteristics) != t:
        raise UnbalancedPanel(f"{len(panel.characteristics)} characteristic matrices for {t} periods")
    l = panel.characteristics[0].shape[1]
    if not (n > l >= 1 and t >= 2):
        raise UnbalancedPanel(f"need N > L >= 1 and T >= 2, got N={n}, L={l}, T={t}")
    for idx, x in enumerate(panel.characteristics):
        if x.shape != (n, l):
            raise UnbalancedPanel(f"characteristic matrix at period {idx} has shape {x.shape}")
        w = np.linalg.eigvalsh(x.T @ x)
        if w[0] <= GRAM_EIG_TOL * max(w[-1], 0.0):
            raise RankDeficientCharacteristics(panel.period_labels[idx])
    if panel.has_constant:
        for idx, x in enumerate(panel.characteristics):
            if not np.all(x[:, 0] == 1.0):
                raise UnbalancedPanel(f"has_constant set but column 1 at period {idx} is not all ones")


def _detect_constant(characteristics) -> bool:
    return all(np.all(x[:, 0] == 1.0) for x in characteristics)


def load_panel(path, schema: PanelSchema | None = None) -> Panel:
    """Load a balanced panel from long-format CSV.

    Expected header: asset_id,period,ret,c1,...,cL (names configurable via
    schema). Empty fields are missing values; missing_policy decides whether
    the asset is dropped or the load fails.
    """
    schema = schema or PanelSchema()
    df = pd.read_csv(path, dtype={schema.asset_col: str, schema.period_col: str})
    for col in (schema.asset_col, schema.period_col, schema.return_col):
        if col not in df.columns:
            raise MissingColumn(col)
    if schema.char_cols:
        char_cols = list(schema.char_cols)
        for col in char_cols:
            if col not in df.columns:
                raise MissingColumn(col)
    else:
        reserved = {schema.asset_col, schema.period_col, schema.return_col}
        char_cols = [c for c in df.columns if c not in reserved]
    if not char_cols:
        raise MissingColumn("c1 (no characteristic columns found)")

    periods = sorted(df[schema.period_col].unique(), key=_period_key(schema.period_format))
    t_len = len(periods)

    value_cols = [schema.return_col] + char_cols
    complete = df.dropna(subset=value_cols)
    counts = complete.groupby(schema.asset_col)[schema.period_col].nunique()
    full = set(counts[counts == t_len].index)
    all_assets = set(df[schema.asset_col].unique())
    incomplete = sorted(all_assets - full)
    if incomplete:
        if schema.missing_policy == "error":
            raise UnbalancedPanel(
                f"{len(incomplete)} asset(s) not observed in all {t_len} periods: {incomplete[:5]}"
            )
        logger.info("dropping %d asset(s) with incomplete observations", len(incomplete))
    assets = sorted(full)
    if not assets:
        raise UnbalancedPanel("no asset is observed in every period")

    sub = complete[complete[schema.asset_col].isin(full)]
    sub = sub.set_index([schema.asset_col, schema.period_col]).sort_index()
    if sub.index.duplicated().any():
        dup = sub.index[sub.index.duplicated()][0]
        raise UnbalancedPanel(f"duplicate observation for {dup}")

    n = len(assets)
    returns = np.empty((n, t_len))
    characteristics = []
    for j, p in enumerate(periods):
        block = sub.xs(p, level=schema.period_col).loc[assets]
        returns[:, j] = block[schema.return_col].to_numpy(dtype=float)
        characteristics.append(np.ascontiguousarray(block[char_cols].to_numpy(dtype=float)))

    panel = Panel(
        returns=returns,
        characteristics=characteristics,
        asset_ids=list(assets),
        period_labels=[str(p) for p in periods],
        has_constant=_detect_constant(characteristics),
        char_names=tuple(char_cols),
    )
    validate_panel(panel)
    return panel


def _period_key(period_format):
    if period_format is None:
        return lambda p: str(p)
    from datetime import datetime

    return lambda p: datetime.strptime(str(p), period_format)


def rank_normalize(panel: Panel, ties: str = "ordinal") -> Panel:
    """Map each characteristic cross-section to -0.5 + rank/N.

    Ranks are 1 = smallest. Ties: "ordinal" breaks them by ascending asset_id
    (assets are already sorted by id, so a stable sort on values does it);
    "average" assigns tied entries their average rank. The constant column,
    when flagged, is left untouched.
    """
    from scipy.stats import rankdata

    if ties not in ("ordinal", "average"):
        raise ValueError(f"unknown tie rule: {ties!r}")
    n = panel.n
    start = 1 if panel.has_constant else 0
    new_chars = []
    for x in panel.characteristics:
        out = x.copy()
        for col in range(start, x.shape[1]):
            z = rankdata(x[:, col], method=ties)
            out[:, col] = -0.5 + z / n
        new_chars.append(out)
    return replace(panel, characteristics=new_chars)


def rescale_characteristics(panel: Panel, weights) -> Panel:
    """Multiply characteristic columns by positive weights (unit changes).

    Used by the unit-invariance property tests; the fitted alphas must not
    move under this transformation.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (panel.l,):
        raise NonPositiveWeight(f"need {panel.l} weights, got shape {w.shape}")
    if np.any(w <= 0):
        raise NonPositiveWeight("all weights must be > 0")
    new_chars = [x * w[None, :] for x in panel.characteristics]
    return replace(panel, characteristics=new_chars)
