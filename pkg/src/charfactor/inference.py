"""Variance estimators, max-statistic tests, bootstrap, Wald tests, FDR bands.

All variances assume independence across assets and periods with per-period
heteroskedasticity; HAC/clustered variants are out of scope. Critical values
come either from the Gaussian union bound Phi^{-1}(1 - level/(2m)) or from a
Gaussian-multiplier bootstrap of the max statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special

from ._linalg import inv_spd, spd_solve
from .errors import (
    RankDeficientLoadings,
    SingularFactorGram,
    SingularVariance,
    ZeroVariance,
)
from .factor import ModelFit, TransformedReturns
from .outalpha import OutsideAlphaFit, basis_ops
from .panel import Panel

DEFAULT_LEVELS = (0.10, 0.05, 0.01)


# --------------------------------------------------------------------------
# Gaussian / chi-square helpers (scipy.special keeps |error| < 1e-9 on the
# ranges the tests exercise, including 5+ sigma tails).


def normal_cdf(x) -> np.ndarray:
    return scipy.special.ndtr(x)


def normal_quantile(p) -> np.ndarray:
    return scipy.special.ndtri(p)


def chi2_quantile(p: float, df: int) -> float:
    """Lower-tail chi-square quantile: P(X <= q) = p."""
    return float(scipy.special.chdtri(df, 1.0 - p))


def union_bound_critical_value(level: float, m: int) -> float:
    return float(normal_quantile(1.0 - level / (2.0 * m)))


# --------------------------------------------------------------------------
# Variance estimators


@dataclass(frozen=True)
class VarianceEstimates:
    gamma_row_cov: np.ndarray  # (L, K, K), Var(sqrt(NT)(gamma_l - target))
    v_inside: np.ndarray  # (N, T)
    v_delta: np.ndarray  # (N-L, T), row-constant per period
    v_outside: np.ndarray  # (N, T)


def estimate_gamma_row_covs(panel: Panel, fit: ModelFit) -> np.ndarray:
    """All L sandwich matrices Qf^{-1} M_l Qf^{-1} at once.

    M_l = T^{-1} sum_t sigma2_{t+1} [Q_t^{-1}]_{ll} fd_{t+1} fd_{t+1}',
    Q_t = X_t'X_t/N, Qf = T^{-1} sum fd fd'.
    """
    n, t_len, l_dim = panel.n, panel.t, panel.l
    fd = fit.factors_demeaned  # (K, T)
    qf = fd @ fd.T / t_len
    qf_inv = inv_spd(qf, SingularFactorGram("factor second-moment matrix is singular"))
    qinv_diag = np.empty((t_len, l_dim))
    for t, x in enumerate(panel.characteristics):
        qt = x.T @ x / n
        qinv_diag[t] = np.diag(
            inv_spd(qt, RankDeficientLoadings(str(panel.period_labels[t])))
        )
    out = np.empty((l_dim, fd.shape[0], fd.shape[0]))
    for l in range(l_dim):
        w = fit.sigma2 * qinv_diag[:, l]
        mid = (fd * w[None, :]) @ fd.T / t_len
        out[l] = qf_inv @ mid @ qf_inv
    return out


def estimate_gamma_row_variance(panel: Panel, fit: ModelFit, l: int) -> np.ndarray:
    """Sandwich covariance for loading row l, scaled to sqrt(NT) errors."""
    return estimate_gamma_row_covs(panel, fit)[l]


def estimate_inside_variance(panel: Panel, tr: TransformedReturns, fit: ModelFit) -> np.ndarray:
    """V_I per asset-period cell, vectorized over assets and the inner period sum.

    Per cell the literal formula is
        sigma2_I,it = (1/(T L)) sum_s sigma2_{s+1} c_{its}' Q_s c_{its},
        c_{its} = a_{ts} A_it - b_{its} B_t,
    with a/b/A/B built from the fitted loadings, eta, mean transformed
    returns, and demeaned factors; V_I = sigma2_I * L/(NT). Expanding the
    quadratic in (a, b) turns the period sum into three weighted moment
    matrices per t, each shared by every asset.
    """
    n, t_len, l_dim = panel.n, panel.t, panel.l
    gamma, eta, fd, sigma2 = fit.gamma, fit.eta, fit.factors_demeaned, fit.sigma2
    k = gamma.shape[1]
    qf = fd @ fd.T / t_len
    sfg = SingularFactorGram("factor second-moment matrix is singular")
    gmat = spd_solve(qf, fd, sfg)  # (K, T), column s = Qf^{-1} fd_s
    barf = spd_solve(
        gamma.T @ gamma, gamma.T @ tr.rddot_mean, SingularFactorGram("gamma gram is singular")
    )
    q_all = np.empty((t_len, l_dim, l_dim))
    qinv_all = np.empty((t_len, l_dim, l_dim))
    for t, x in enumerate(panel.characteristics):
        q_all[t] = x.T @ x / n
        qinv_all[t] = inv_spd(q_all[t], RankDeficientLoadings(str(panel.period_labels[t])))
    out = np.empty((n, t_len))
    for t in range(t_len):
        x = panel.characteristics[t]
        qt = q_all[t]
        gqg = gamma.T @ qt @ gamma
        gqg_inv = inv_spd(gqg, RankDeficientLoadings(str(panel.period_labels[t])))
        h = gqg_inv @ (gamma.T @ (qt @ eta))  # (K,)
        w = h + barf
        b_row = eta - gamma @ h  # (L,)
        a_vec = 1.0 - w @ gmat  # (T,) over inner index s
        sa2 = sigma2 * a_vec**2
        qb = np.einsum("sij,j->si", q_all, b_row)  # (T, L)
        r_mat = np.einsum("s,sij->ij", sa2, q_all)  # (L, L)
        s_mat = (qb * (sigma2 * a_vec)[:, None]).T @ gmat.T  # (L, K)
        beta = qb @ b_row  # (T,)
        g_mat = (gmat * (sigma2 * beta)[None, :]) @ gmat.T  # (K, K)
        a_rows = x @ (qinv_all[t] - gamma @ gqg_inv @ gamma.T)  # (N, L)
        u_rows = (x @ gamma) @ gqg_inv  # (N, K)
        total = (
            np.einsum("il,il->i", a_rows @ r_mat, a_rows)
            - 2.0 * np.einsum("ik,ik->i", a_rows @ s_mat, u_rows)
            + np.einsum("ik,ik->i", u_rows @ g_mat, u_rows)
        )
        out[:, t] = np.clip(total, 0.0, None) / (n * t_len**2)
    return out


def estimate_outside_variance(
    panel: Panel, outside: OutsideAlphaFit, sigma2: np.ndarray, bases=None, omega_spec=None
) -> np.ndarray:
    """(bar-s2/T)(||B_row||^2/N) + s2_{t+1} sum_{q in support_t} B_iq^2 / N."""
    if bases is None:
        from .outalpha import OmegaSpec

        bases = basis_ops(panel, omega_spec or OmegaSpec())
    n, t_len = panel.n, panel.t
    sigma2 = np.asarray(sigma2, dtype=float)
    bar = float(sigma2.mean())
    out = np.empty((n, t_len))
    for t, ops in enumerate(bases):
        base = (bar / t_len) * (ops.row_norms_sq() / n)
        d = outside.support[t]
        if len(d):
            cols = ops.columns(np.asarray(d))
            base = base + sigma2[t] * np.einsum("ij,ij->i", cols, cols) / n
        out[:, t] = base
    return out


def delta_variance(sigma2: np.ndarray, n: int, q_dim: int) -> np.ndarray:
    """V_delta,tq = sigma2_{t+1}/N, constant across coordinates q."""
    row = np.asarray(sigma2, dtype=float) / n
    return np.tile(row, (q_dim, 1))


def compute_variances(
    panel: Panel,
    tr: TransformedReturns,
    fit: ModelFit,
    outside: OutsideAlphaFit,
    bases=None,
) -> VarianceEstimates:
    return VarianceEstimates(
        gamma_row_cov=estimate_gamma_row_covs(panel, fit),
        v_inside=estimate_inside_variance(panel, tr, fit),
        v_delta=delta_variance(fit.sigma2, panel.n, panel.n - panel.l),
        v_outside=estimate_outside_variance(panel, outside, fit.sigma2, bases=bases),
    )


# --------------------------------------------------------------------------
# Test reports


@dataclass(frozen=True)
class TestReport:
    name: str
    value: float
    critical_values: dict  # level (str, e.g. "0.05") -> critical value
    p_value_bound: float
    decisions: dict  # level -> bool (reject)
    m: int
    counts: dict  # N, T, L, K where applicable

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "critical_values": self.critical_values,
            "p_value_bound": self.p_value_bound,
            "decisions": self.decisions,
            "m": self.m,
            "counts": self.counts,
        }


def _level_key(level: float) -> str:
    return format(level, ".10g")


def max_stat_test(
    values: np.ndarray,
    variances: np.ndarray,
    demean_over_t: bool,
    levels=DEFAULT_LEVELS,
    name: str = "max-stat",
    counts: dict | None = None,
) -> TestReport:
    """Max absolute studentized cell against the Gaussian union bound.

    statistic = max |values / sqrt(variances)| after optional per-row time
    demeaning of `values`; critical value Phi^{-1}(1 - level/(2m)) with m the
    number of tested cells; p-value bound min(1, 2m (1 - Phi(statistic))).
    """
    values = np.asarray(values, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if values.shape != variances.shape:
        raise ValueError("values and variances must have the same shape")
    if demean_over_t:
        values = values - values.mean(axis=1, keepdims=True)
    bad = np.argwhere(variances <= 0)
    if bad.size:
        raise ZeroVariance(tuple(int(v) for v in bad[0]))
    stat = float(np.max(np.abs(values) / np.sqrt(variances)))
    m = values.size
    crit = {_level_key(a): union_bound_critical_value(a, m) for a in levels}
    decisions = {key: bool(stat > c) for key, c in crit.items()}
    p_bound = float(min(1.0, 2.0 * m * (1.0 - normal_cdf(stat))))
    base_counts = {"cells": m}
    if counts:
        base_counts.update(counts)
    return TestReport(
        name=name,
        value=stat,
        critical_values=crit,
        p_value_bound=p_bound,
        decisions=decisions,
        m=m,
        counts=base_counts,
    )


# --------------------------------------------------------------------------
# Gaussian multiplier bootstrap

# Score objects expose `multiplier_shape` (shape of the iid N(0,1) multiplier
# array drawn fresh each draw) and `max_abs(e)` (the bootstrap max statistic
# for that multiplier array).


class DenseScores:
    """Generic linear scores: cell c gets weights[c] . e_flat."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        self.multiplier_shape = (self.weights.shape[1],)

    def max_abs(self, e: np.ndarray) -> float:
        return float(np.max(np.abs(self.weights @ e)))


class DeltaScores:
    """Studentized delta-cell scores: N^{-1/2} sum_j B_{t,jq} eps_{jt} e_{jt} / sigma_{t+1}.

    Multipliers are drawn per (asset, period) pair, shared by the cells of a
    period, which preserves the cross-coordinate dependence of the max.
    """

    def __init__(self, bases, residuals: np.ndarray, sigma2: np.ndarray):
        self.bases = bases
        self.residuals = residuals  # (N, T)
        self.sigma = np.sqrt(np.asarray(sigma2, dtype=float))
        self.multiplier_shape = residuals.shape

    def max_abs(self, e: np.ndarray) -> float:
        n, t_len = self.residuals.shape
        best = 0.0
        root_n = math.sqrt(n)
        for t, ops in enumerate(self.bases):
            score = ops.bt_dot(self.residuals[:, t] * e[:, t]) / (root_n * self.sigma[t])
            best = max(best, float(np.max(np.abs(score))))
        return best


class AlphaOutsideScores:
    """Studentized outside-alpha cell scores.

    The influence of cell (i, t) splits into the level part, shared across
    periods through zeta, and the period-t spike part on the thresholded
    support; each is linear in the multiplied residuals and the cell is
    studentized by the same variance used for the analytic test.
    """

    def __init__(self, bases, residuals, outside: OutsideAlphaFit, v_outside: np.ndarray):
        self.bases = bases
        self.residuals = residuals
        self.outside = outside
        self.sd = np.sqrt(v_outside)
        self.multiplier_shape = residuals.shape
        self._support_cols = [
            ops.columns(np.asarray(outside.support[t])) for t, ops in enumerate(bases)
        ]

    def max_abs(self, e: np.ndarray) -> float:
        n, t_len = self.residuals.shape
        prods = [
            ops.bt_dot(self.residuals[:, t] * e[:, t]) for t, ops in enumerate(self.bases)
        ]
        u = sum(prods) / (n * t_len)  # level-part influence, per coordinate
        best = 0.0
        for t, ops in enumerate(self.bases):
            infl = ops.b_dot(u)
            d = self.outside.support[t]
            if len(d):
                infl = infl + self._support_cols[t] @ (prods[t][np.asarray(d)] / n)
            best = max(best, float(np.max(np.abs(infl) / self.sd[:, t])))
        return best


def bootstrap_critical_value(scores, level: float, draws: int, seed: int) -> float:
    """(1 - level) empirical quantile of the multiplier-bootstrap max statistic.

    Each draw uses an independent counter-based stream keyed by
    (seed, draw_index), so results are identical for any execution order.
    """
    if draws < 200:
        raise ValueError("bootstrap needs at least 200 draws")
    stats = np.empty(draws)
    shape = scores.multiplier_shape
    for b in range(draws):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, b))))
        stats[b] = scores.max_abs(rng.standard_normal(shape))
    return float(np.quantile(stats, 1.0 - level, method="higher"))


# --------------------------------------------------------------------------
# Wald tests on loading rows


def wald_gamma_test(
    fit: ModelFit,
    gamma_row_cov: np.ndarray,
    l: int,
    n: int,
    t_len: int,
    n_tests: int,
    levels=DEFAULT_LEVELS,
    name: str | None = None,
) -> TestReport:
    """W_l = NT gamma_l' V_l^{-1} gamma_l vs chi2_K at 1 - level/n_tests."""
    k = fit.gamma.shape[1]
    cov = gamma_row_cov[l]
    g = fit.gamma[l]
    w = float(n * t_len * (g @ spd_solve(cov, g, SingularVariance(l))))
    crit = {_level_key(a): chi2_quantile(1.0 - a / n_tests, k) for a in levels}
    decisions = {key: bool(w > c) for key, c in crit.items()}
    p_single = float(scipy.special.chdtrc(k, w))
    p_bound = float(min(1.0, n_tests * p_single))
    return TestReport(
        name=name or f"wald-row-{l}",
        value=w,
        critical_values=crit,
        p_value_bound=p_bound,
        decisions=decisions,
        m=n_tests,
        counts={"K": k, "row": l},
    )


# --------------------------------------------------------------------------
# FDR confidence bands (Benjamini-Yekutieli)


@dataclass(frozen=True)
class FdrBands:
    lo: np.ndarray
    hi: np.ndarray
    z_star: np.ndarray
    selected: np.ndarray  # boolean
    threshold_index: int  # k*, 0 when nothing selected


def fdr_confidence_bands(estimates: np.ndarray, variances: np.ndarray, level: float) -> FdrBands:
    """Per-cell intervals estimate +/- z* sqrt(variance), z* from the BY step-up.

    Two-sided p-values of every cell enter the Benjamini-Yekutieli procedure
    at rate `level` with the harmonic-sum correction c_m = sum_{j<=m} 1/j:
    thresholds tau_k = k level/(m c_m), k* = max{k : p_(k) <= tau_k}. Cells
    selected at k* get z* = Phi^{-1}(1 - tau_{k*}/2); unselected cells (and
    everything when k* = 0) get the most conservative z*, from tau_1.
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.shape != var.shape:
        raise ValueError("estimates and variances must have the same shape")
    m = est.size
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(est) / np.sqrt(var)
    z = np.where(var > 0, z, np.where(est == 0.0, 0.0, np.inf))
    pvals = 2.0 * (1.0 - normal_cdf(z))
    c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.sort(pvals.ravel())
    tau = np.arange(1, m + 1) * level / (m * c_m)
    passing = np.flatnonzero(order <= tau)
    k_star = int(passing[-1] + 1) if passing.size else 0
    tau1 = level / (m * c_m)
    z_cons = float(normal_quantile(1.0 - tau1 / 2.0))
    if k_star == 0:
        selected = np.zeros(est.shape, dtype=bool)
        z_star = np.full(est.shape, z_cons)
    else:
        tau_k = k_star * level / (m * c_m)
        selected = pvals <= tau_k
        z_sel = float(normal_quantile(1.0 - tau_k / 2.0))
        z_star = np.where(selected, z_sel, z_cons)
    half = z_star * np.sqrt(var)
    return FdrBands(lo=est - half, hi=est + half, z_star=z_star, selected=selected,
                    threshold_index=k_star)
