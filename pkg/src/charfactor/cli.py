"""Command-line interface: fit, test, simulate, select-rank.

All machine-readable output goes to files in --out (JSON/CSV); progress and
human-readable summaries go to stderr. Exit codes: 0 success, 2 data error,
3 numerical degeneracy, 4 study failure. JSON artifacts are deterministic
functions of (input bytes, config, seed): keys are sorted and every float is
written with 17 significant digits, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CharfactorError, DataError, NumericalError, StudyFailure
from .factor import model_fit_to_dict, select_rank, transform_returns
from .inference import (
    AlphaOutsideScores,
    DeltaScores,
    bootstrap_critical_value,
    compute_variances,
    fdr_confidence_bands,
    union_bound_critical_value,
    wald_gamma_test,
)
from .outalpha import OmegaSpec, ThresholdConfig, outside_fit_to_dict
from .panel import Panel, PanelSchema, load_panel, rank_normalize
from .pipeline import FitConfig, FitResult, fit_model
from . import simlab

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.10, 0.05, 0.01)


# --------------------------------------------------------------------------
# Deterministic serialization


def _format_float(x: float) -> str:
    if x != x:
        return "NaN"
    if x == float("inf"):
        return "Infinity"
    if x == float("-inf"):
        return "-Infinity"
    return format(x, ".17g")


def _to_json(obj, parts: list) -> None:
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, key in enumerate(sorted(obj, key=str)):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(key)))
            parts.append(":")
            _to_json(obj[key], parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        parts.append("[")
        for i, item in enumerate(seq):
            if i:
                parts.append(",")
            _to_json(item, parts)
        parts.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def write_json(path: Path, obj) -> None:
    parts: list = []
    _to_json(obj, parts)
    path.write_text("".join(parts) + "\n")


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [_format_float(v) if isinstance(v, float) else v for v in row]
            )


# --------------------------------------------------------------------------
# Shared plumbing


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _schema_from_config(cfg: dict) -> PanelSchema:
    kwargs = {}
    for key in ("asset_col", "period_col", "return_col", "missing_policy", "period_format", "ties"):
        if key in cfg:
            kwargs[key] = cfg[key]
    if "char_cols" in cfg:
        kwargs["char_cols"] = tuple(cfg["char_cols"])
    return PanelSchema(**kwargs)


def _load_prepared_panel(args, cfg: dict) -> Panel:
    schema = _schema_from_config(cfg)
    panel = load_panel(args.input, schema)
    if cfg.get("rank_normalize", False):
        panel = rank_normalize(panel, ties=schema.ties)
    return panel


def _threshold_config(args) -> ThresholdConfig:
    if args.rho_c is not None or args.rho_kappa is not None:
        if args.rho_c is None or args.rho_kappa is None:
            raise ValueError("custom threshold needs both --rho-c and --rho-kappa")
        if not (args.rho_c > 0 and args.rho_kappa > 0):
            raise ValueError("custom threshold requires c > 0 and kappa > 0")
        return ThresholdConfig(c=args.rho_c, kappa=args.rho_kappa)
    return ThresholdConfig.preset(args.rho_preset)


def _fit_config(args) -> FitConfig:
    return FitConfig(
        k=args.k,
        k_max=args.k_max,
        omega=OmegaSpec(variant=args.omega),
        rho=_threshold_config(args),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _alpha_rows(panel: Panel, alpha: np.ndarray):
    for j, period in enumerate(panel.period_labels):
        for i, asset in enumerate(panel.asset_ids):
            yield [asset, period, float(alpha[i, j])]


def _residuals(panel: Panel, result: FitResult) -> np.ndarray:
    fitted = result.outside.alpha_outside + result.fit.alpha_inside
    out = np.empty_like(fitted)
    for t in range(panel.t):
        out[:, t] = panel.returns[:, t] - (
            fitted[:, t]
            + panel.characteristics[t] @ (result.fit.gamma @ result.fit.factors_breve[:, t])
        )
    return out


def _char_names(panel: Panel) -> list:
    if panel.char_names and len(panel.char_names) == panel.l:
        return list(panel.char_names)
    return [f"c{j}" for j in range(panel.l)]


# --------------------------------------------------------------------------
# Commands


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    panel = _load_prepared_panel(args, cfg)
    result = fit_model(panel, _fit_config(args))
    out = _out_dir(args)

    doc = model_fit_to_dict(result.fit, panel.asset_ids, panel.period_labels)
    doc["r2"] = result.r2
    doc["omega"] = result.omega.variant
    write_json(out / "model_fit.json", doc)

    outside_doc = outside_fit_to_dict(result.outside, panel.period_labels)
    outside_doc["omega"] = result.omega.variant
    write_json(out / "outside_fit.json", outside_doc)

    write_csv(
        out / "alphas_inside.csv",
        ["asset_id", "period", "alpha"],
        _alpha_rows(panel, result.fit.alpha_inside),
    )
    write_csv(
        out / "alphas_outside.csv",
        ["asset_id", "period", "alpha"],
        _alpha_rows(panel, result.outside.alpha_outside),
    )
    xi_rows = []
    for t, period in enumerate(panel.period_labels):
        for q in result.outside.support[t]:
            xi_rows.append([period, int(q), float(result.outside.xi[q, t])])
    write_csv(out / "xi.csv", ["period", "coordinate", "xi"], xi_rows)
    (out / "r2.txt").write_text(_format_float(result.r2) + "\n")
    print(
        f"fit: N={panel.n} T={panel.t} L={panel.l} K={result.k} r2={result.r2:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_test(args) -> int:
    from .inference import max_stat_test

    cfg = _load_config(args.config)
    panel = _load_prepared_panel(args, cfg)
    result = fit_model(panel, _fit_config(args))
    out = _out_dir(args)
    levels = tuple(args.levels) if args.levels else DEFAULT_LEVELS

    variances = compute_variances(panel, result.tr, result.fit, result.outside, bases=result.bases)
    base_counts = {"N": panel.n, "T": panel.t, "L": panel.l, "K": result.k}

    reports = {
        "tstat1": max_stat_test(
            result.outside.delta_raw, variances.v_delta, False, levels,
            name="tstat1", counts=base_counts,
        ),
        "tstat2": max_stat_test(
            result.outside.delta_raw, variances.v_delta, True, levels,
            name="tstat2", counts=base_counts,
        ),
        "tstat_o": max_stat_test(
            result.outside.alpha_outside, variances.v_outside, False, levels,
            name="tstat_o", counts=base_counts,
        ),
        "tstat_i": max_stat_test(
            result.fit.alpha_inside, variances.v_inside, False, levels,
            name="tstat_i", counts=base_counts,
        ),
    }

    names = _char_names(panel)
    rows = [l for l in range(panel.l) if not (panel.has_constant and l == 0)]
    n_tests = len(rows)
    wald_reports = [
        wald_gamma_test(
            result.fit, variances.gamma_row_cov, l, panel.n, panel.t, n_tests,
            levels=levels, name=names[l],
        )
        for l in rows
    ]

    doc = {name: rep.to_dict() for name, rep in reports.items()}
    doc["wald"] = [rep.to_dict() for rep in wald_reports]

    if args.bootstrap_draws:
        residuals = _residuals(panel, result)
        delta_scores = DeltaScores(result.bases, residuals, result.fit.sigma2)
        alpha_scores = AlphaOutsideScores(
            result.bases, residuals, result.outside, variances.v_outside
        )
        for key, scores in (("tstat1", delta_scores), ("tstat_o", alpha_scores)):
            doc[key]["bootstrap_critical_values"] = {
                format(a, ".10g"): bootstrap_critical_value(
                    scores, a, args.bootstrap_draws, args.seed
                )
                for a in levels
            }
    write_json(out / "tests.json", doc)

    wald_csv_rows = [
        [rep.name, rep.value]
        + [rep.critical_values[k] for k in sorted(rep.critical_values)]
        + [rep.p_value_bound]
        for rep in wald_reports
    ]
    crit_headers = [f"crit_{k}" for k in sorted(wald_reports[0].critical_values)] if wald_reports else []
    write_csv(
        out / "gamma_wald.csv",
        ["characteristic", "wald"] + crit_headers + ["p_value_bound"],
        wald_csv_rows,
    )

    fdr_level = float(cfg.get("fdr_level", 0.05))
    bands = fdr_confidence_bands(result.outside.alpha_outside, variances.v_outside, fdr_level)
    band_rows = []
    for j, period in enumerate(panel.period_labels):
        for i, asset in enumerate(panel.asset_ids):
            band_rows.append(
                [
                    asset,
                    period,
                    float(result.outside.alpha_outside[i, j]),
                    float(bands.lo[i, j]),
                    float(bands.hi[i, j]),
                    int(bands.selected[i, j]),
                ]
            )
    write_csv(
        out / "fdr_bands.csv",
        ["asset_id", "period", "estimate", "lo", "hi", "selected"],
        band_rows,
    )
    print(
        "tests: "
        + " ".join(f"{name}={rep.value:.3f}" for name, rep in reports.items()),
        file=sys.stderr,
    )
    return 0


def _study_dgp(cfg: dict) -> simlab.DgpConfig:
    preset = cfg.get("preset", "b1-desk")
    seed = int(cfg.get("seed", 0))
    if preset == "b1-desk":
        base = simlab.config_b1_desk(seed=seed)
    elif preset == "b1-full":
        base = simlab.config_b1_full(seed=seed)
    elif preset == "b2-power":
        base = simlab.config_b2_power(seed=seed)
    else:
        raise ValueError(f"unknown preset: {preset!r}")
    return base


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    study = cfg.get("study", "coverage")
    reps = int(cfg.get("reps", 100))
    out = _out_dir(args)
    n_jobs = args.threads
    rho = _threshold_config(args) if (args.rho_c is not None or args.rho_kappa is not None) else (
        ThresholdConfig.preset(cfg.get("rho_preset", "simulation"))
    )

    if study == "coverage":
        levels = tuple(cfg.get("levels", (0.90, 0.95, 0.99)))
        dgp = _study_dgp(cfg)
        mc = simlab.run_coverage_study(dgp, reps, levels=levels, rho=rho, n_jobs=n_jobs)
        table = simlab.coverage_table(mc, levels=levels)
        write_csv(
            out / "coverage.csv",
            ["parameter", "level", "coverage", "reps", "se"],
            [[r["parameter"], r["level"], r["coverage"], r["reps"], r["se"]] for r in table],
        )
        for name in simlab.TRACKED_PARAMS:
            errors = simlab.standardized_errors(mc, name)
            write_csv(
                out / f"hist_{name}.csv",
                ["bin_lo", "bin_hi", "count", "ref_density"],
                [
                    [r["bin_lo"], r["bin_hi"], r["count"], r["ref_density"]]
                    for r in simlab.histogram_rows(errors)
                ],
            )
        summary = {
            "study": "coverage",
            "reps_requested": reps,
            "reps_completed": len(mc.records),
            "failures": len(mc.failures),
            "failure_rate": mc.failure_rate,
        }
        write_json(out / "summary.json", summary)
        print(f"coverage study: {len(mc.records)}/{reps} replications", file=sys.stderr)
    elif study == "power":
        grid = cfg.get("delta1_grid", (0.0, 0.02, 0.05))
        rows = simlab.run_power_study(
            grid,
            reps,
            level=float(cfg.get("level", 0.99)),
            n=int(cfg.get("n", 500)),
            t_len=int(cfg.get("t", 200)),
            seed=int(cfg.get("seed", 0)),
            rho=rho,
            method=cfg.get("method", "formula"),
            bootstrap_draws=int(cfg.get("bootstrap_draws", 500)),
            n_jobs=n_jobs,
        )
        write_csv(
            out / "power.csv",
            ["delta1", "method", "rejection_rate", "reps", "failures"],
            [
                [r["delta1"], r["method"], r["rejection_rate"], r["reps"], r["failures"]]
                for r in rows
            ],
        )
        failures = sum(r["failures"] for r in rows)
        summary = {
            "study": "power",
            "reps_requested": reps * len(list(grid)),
            "failures": failures,
            "rows": len(rows),
        }
        write_json(out / "summary.json", summary)
        print(f"power study: {len(rows)} grid points", file=sys.stderr)
    else:
        raise ValueError(f"unknown study type: {study!r}")
    return 0


def cmd_select_rank(args) -> int:
    cfg = _load_config(args.config)
    panel = _load_prepared_panel(args, cfg)
    tr = transform_returns(panel)
    k = select_rank(tr, args.k_max)
    if args.out:
        out = _out_dir(args)
        s = np.linalg.svd(tr.rddot_demeaned, compute_uv=False)
        write_json(out / "rank.json", {"k": k, "singular_values": [float(v) for v in s]})
    print(k)
    return 0


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charfactor",
        description="Conditional latent-factor asset-pricing models with "
        "characteristic-spanned and orthogonal pricing errors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_input: bool):
        if needs_input:
            p.add_argument("--input", required=True, help="panel CSV path")
        p.add_argument("--config", help="JSON config (schema mapping, study settings)")
        p.add_argument("--k", type=int, default=None, help="number of factors (default: auto)")
        p.add_argument("--k-max", type=int, default=None, dest="k_max",
                       help="cap for automatic rank selection")
        p.add_argument("--omega", choices=("simple", "structured"), default="simple")
        p.add_argument("--rho-preset", choices=("empirical", "simulation"),
                       default="empirical", dest="rho_preset")
        p.add_argument("--rho-c", type=float, default=None, dest="rho_c")
        p.add_argument("--rho-kappa", type=float, default=None, dest="rho_kappa")
        p.add_argument("--levels", type=float, nargs="+", default=None,
                       help="test significance levels (default 0.10 0.05 0.01)")
        p.add_argument("--bootstrap-draws", type=int, default=0, dest="bootstrap_draws")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes for simulation studies")
        p.add_argument("--out", default="charfactor_out", help="output directory")

    add_common(sub.add_parser("fit", help="estimate the model and write artifacts"), True)
    add_common(sub.add_parser("test", help="fit plus the full test battery"), True)
    add_common(sub.add_parser("select-rank", help="eigenvalue-ratio rank selection"), True)
    sim = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    add_common(sim, False)
    return parser


_COMMANDS = {
    "fit": cmd_fit,
    "test": cmd_test,
    "simulate": cmd_simulate,
    "select-rank": cmd_select_rank,
}


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get("CHARFACTOR_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except StudyFailure as exc:
        print(f"study failure: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, CharfactorError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
