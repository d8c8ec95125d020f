"""Loading-matrix and inside-alpha estimation.

The estimator works in characteristic space: per period, returns are mapped
through the cross-sectional least-squares transform Rddot_{t+1} =
(X_t'X_t)^{-1} X_t' R_{t+1}, whose demeaned panel is low-rank plus noise.
The loading matrix is the top-K left singular subspace of that panel; a
closed-form correction then removes the noise-variance-induced bias of the
spectral estimate. Inside alphas are the characteristic-spanned pricing
errors orthogonal to the fitted loadings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._linalg import RELATIVE_EIG_FLOOR, inv_spd, spd_solve
from .errors import (
    DegenerateSpectrum,
    NumericalError,
    RankDeficientLoadings,
    SingularFactorGram,
)
from .panel import Panel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformedReturns:
    rddot: np.ndarray  # (L, T)
    rddot_mean: np.ndarray  # (L,)
    rddot_demeaned: np.ndarray  # (L, T)


@dataclass(frozen=True)
class ModelFit:
    gamma: np.ndarray  # (L, K)
    factors_demeaned: np.ndarray  # (K, T)
    factors_breve: np.ndarray  # (K, T); recovered factor path
    eta: np.ndarray  # (L,)
    alpha_inside: np.ndarray  # (N, T)
    sigma2: np.ndarray  # (T,)
    debiased: bool
    k: int


def transform_returns(panel: Panel) -> TransformedReturns:
    """Cross-sectional least squares of R_{t+1} on X_t, stacked over t."""
    l, t_len = panel.l, panel.t
    rddot = np.empty((l, t_len))
    for t in range(t_len):
        x = panel.characteristics[t]
        rddot[:, t] = spd_solve(
            x.T @ x,
            x.T @ panel.returns[:, t],
            _rank_error(panel, t),
        )
    mean = rddot.mean(axis=1)
    return TransformedReturns(rddot=rddot, rddot_mean=mean, rddot_demeaned=rddot - mean[:, None])


def _rank_error(panel: Panel, t: int):
    from .errors import RankDeficientCharacteristics

    return RankDeficientCharacteristics(panel.period_labels[t])


def _fix_signs(gamma: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of every column made positive, so output does
    # not depend on the linear-algebra backend's sign choices.
    out = gamma.copy()
    for j in range(out.shape[1]):
        idx = np.argmax(np.abs(out[:, j]))
        if out[idx, j] < 0:
            out[:, j] *= -1.0
    return out


def estimate_gamma_plain(tr: TransformedReturns, k: int) -> ModelFit:
    """Spectral estimate: top-k left singular vectors of the demeaned transform.

    Returns a partial fit (gamma + factors_demeaned); eta/alphas are filled in
    by estimate_eta_alpha_inside.
    """
    l, t_len = tr.rddot_demeaned.shape
    if not 1 <= k < min(l, t_len):
        raise NumericalError("K must be < min(L,T)")
    u, s, _ = np.linalg.svd(tr.rddot_demeaned, full_matrices=False)
    floor = 1e-14 * s[0]
    if s[k - 1] <= floor:
        raise DegenerateSpectrum(f"rank of demeaned transform is below k={k}")
    if s[k] > floor and s[k - 1] - s[k] <= 1e-12 * s[0]:
        # an exactly-zero trailing value is perfect separation, not a tie
        raise DegenerateSpectrum(
            f"singular values {k} and {k + 1} coincide (rotation undetermined): {s[k - 1]:.3e} vs {s[k]:.3e}"
        )
    gamma = _fix_signs(u[:, :k])
    factors_demeaned = gamma.T @ tr.rddot_demeaned  # orthonormal columns
    return ModelFit(
        gamma=gamma,
        factors_demeaned=factors_demeaned,
        factors_breve=np.zeros_like(factors_demeaned),
        eta=np.zeros(l),
        alpha_inside=np.zeros((0, 0)),
        sigma2=np.zeros(t_len),
        debiased=False,
        k=k,
    )


def select_rank(tr: TransformedReturns, k_max: int | None = None) -> int:
    """Eigenvalue-ratio rule: argmax over k <= k_max of psi_k / psi_{k+1}.

    A trailing singular value at numerical zero (<= 1e-14 x psi_1) makes the
    ratio infinite; the smallest such k wins.
    """
    l, t_len = tr.rddot_demeaned.shape
    bound = min(l, t_len)
    if k_max is None:
        k_max = min(bound // 2, 15)
        k_max = max(k_max, 1)
    if not 1 <= k_max < bound:
        raise NumericalError(f"k_max must satisfy 1 <= k_max < min(L,T) = {bound}")
    s = np.linalg.svd(tr.rddot_demeaned, compute_uv=False)
    floor = 1e-14 * s[0] if s[0] > 0 else 0.0
    for k in range(1, k_max + 1):
        if s[k] <= floor:
            return k
    ratios = s[:k_max] / s[1 : k_max + 1]
    return int(np.argmax(ratios)) + 1


def estimate_eta_alpha_inside(panel: Panel, tr: TransformedReturns, gamma: np.ndarray):
    """Characteristic-spanned pricing errors orthogonal to the loadings.

    eta = (I - P_gamma) bar-Rddot
    alpha_inside[:, t] = (I - P_{X_t gamma}) X_t bar-Rddot
    factors_breve[:, t] = (g'g)^{-1} g' Rddot_{t+1} + (g'X'Xg)^{-1} g'X'X eta

    Works for any full-column-rank gamma (orthonormal or debiased).
    """
    gg = gamma.T @ gamma
    eta = tr.rddot_mean - gamma @ spd_solve(gg, gamma.T @ tr.rddot_mean, SingularFactorGram("gamma'gamma singular"))
    n, t_len = panel.returns.shape
    k = gamma.shape[1]
    alpha = np.empty((n, t_len))
    breve = np.empty((k, t_len))
    for t in range(t_len):
        x = panel.characteristics[t]
        xg = x @ gamma  # (N, K) loadings
        gram = xg.T @ xg
        xbar = x @ tr.rddot_mean
        err = RankDeficientLoadings(panel.period_labels[t])
        alpha[:, t] = xbar - xg @ spd_solve(gram, xg.T @ xbar, err)
        breve[:, t] = spd_solve(gg, gamma.T @ tr.rddot[:, t], err) + spd_solve(
            gram, xg.T @ (x @ eta), err
        )
    return eta, alpha, breve


def estimate_sigma2(panel: Panel, fit: ModelFit, outside) -> np.ndarray:
    """Per-period mean squared residual of the full decomposition.

    `outside` is an outside-alpha fit or a bare N x T alpha matrix.
    """
    alpha_outside = getattr(outside, "alpha_outside", outside)
    n, t_len = panel.returns.shape
    out = np.empty(t_len)
    for t in range(t_len):
        x = panel.characteristics[t]
        fitted = alpha_outside[:, t] + fit.alpha_inside[:, t] + x @ (fit.gamma @ fit.factors_breve[:, t])
        resid = panel.returns[:, t] - fitted
        out[t] = resid @ resid / n
    return out


def debias_gamma(tr: TransformedReturns, plain: ModelFit, panel: Panel, sigma2: np.ndarray) -> ModelFit:
    """Remove the noise-variance bias of the spectral loading estimate.

    gamma_hat = gamma - (sum_t sigma2_t (X_t'X_t)^{-1}) gamma (g'g)^{-1} (Fd Fd')^{-1}

    Factors, eta and inside alphas are recomputed from the corrected gamma.
    """
    l = plain.gamma.shape[0]
    acc = np.zeros((l, l))
    for t in range(panel.t):
        x = panel.characteristics[t]
        acc += sigma2[t] * inv_spd(x.T @ x, _rank_error(panel, t))
    fgram = plain.factors_demeaned @ plain.factors_demeaned.T
    exc = SingularFactorGram("demeaned factor Gram matrix is singular")
    w = np.linalg.eigvalsh(fgram)
    if w[0] <= RELATIVE_EIG_FLOOR * max(w[-1], 0.0):
        raise exc
    gg_inv = inv_spd(plain.gamma.T @ plain.gamma, exc)
    correction = acc @ plain.gamma @ gg_inv @ inv_spd(fgram, exc)
    gamma = plain.gamma - correction
    factors_demeaned = spd_solve(gamma.T @ gamma, gamma.T @ tr.rddot_demeaned, exc)
    eta, alpha, breve = estimate_eta_alpha_inside(panel, tr, gamma)
    return ModelFit(
        gamma=gamma,
        factors_demeaned=factors_demeaned,
        factors_breve=breve,
        eta=eta,
        alpha_inside=alpha,
        sigma2=np.asarray(sigma2, dtype=float),
        debiased=True,
        k=plain.k,
    )


def fit_r2(panel: Panel, fit: ModelFit, outside) -> float:
    """1 - SSR/SST with SST around the grand mean (reporting convention)."""
    alpha_outside = getattr(outside, "alpha_outside", outside)
    n, t_len = panel.returns.shape
    ssr = 0.0
    for t in range(t_len):
        x = panel.characteristics[t]
        fitted = alpha_outside[:, t] + fit.alpha_inside[:, t] + x @ (fit.gamma @ fit.factors_breve[:, t])
        resid = panel.returns[:, t] - fitted
        ssr += resid @ resid
    grand = panel.returns.mean()
    sst = float(((panel.returns - grand) ** 2).sum())
    return 1.0 - ssr / sst


def model_fit_to_dict(fit: ModelFit, asset_ids, period_labels) -> dict:
    """JSON-ready representation (row-major nested arrays)."""
    return {
        "k": int(fit.k),
        "debiased": bool(fit.debiased),
        "gamma": [[float(v) for v in row] for row in fit.gamma],
        "eta": [float(v) for v in fit.eta],
        "sigma2": [float(v) for v in fit.sigma2],
        "factors_demeaned": [[float(v) for v in row] for row in fit.factors_demeaned],
        "factors_breve": [[float(v) for v in row] for row in fit.factors_breve],
        "asset_ids": list(asset_ids),
        "period_labels": list(period_labels),
    }
