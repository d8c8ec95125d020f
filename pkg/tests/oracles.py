"""Straight-from-the-formula reference implementations used only by tests.

Everything here is written as literally as possible: explicit per-period
loops, dense matrices, no shortcuts shared with the package internals.
Slow on purpose. The package must agree with these within tight tolerances.
"""

import numpy as np


def projector(m):
    """Orthogonal projector onto the column space of m."""
    return m @ np.linalg.solve(m.T @ m, m.T)


def inv_sqrt_sym(a):
    """Inverse square root of a symmetric positive definite matrix."""
    w, v = np.linalg.eigh(a)
    if np.min(w) <= 0:
        raise ValueError("not positive definite")
    return v @ np.diag(w ** -0.5) @ v.T


def transform_oracle(returns, characteristics):
    """Per-period least squares of R_{t+1} on X_t, solved by normal equations."""
    t_len = returns.shape[1]
    l_dim = characteristics[0].shape[1]
    rddot = np.zeros((l_dim, t_len))
    for t in range(t_len):
        x = characteristics[t]
        rddot[:, t] = np.linalg.solve(x.T @ x, x.T @ returns[:, t])
    mean = rddot.mean(axis=1)
    demeaned = rddot - mean[:, None]
    return rddot, mean, demeaned


def gamma_svd_oracle(rddot_demeaned, k):
    """Top-k left singular vectors, sign fixed by largest-magnitude entry."""
    u, s, vt = np.linalg.svd(rddot_demeaned, full_matrices=False)
    gamma = u[:, :k].copy()
    for j in range(k):
        idx = np.argmax(np.abs(gamma[:, j]))
        if gamma[idx, j] < 0:
            gamma[:, j] = -gamma[:, j]
    return gamma, s


def eta_alpha_inside_oracle(returns, characteristics, rddot_mean, gamma):
    """eta = (I - P_gamma) bar-Rddot; alpha_I,t = (I - P_{X_t gamma}) X_t bar-Rddot."""
    l_dim = gamma.shape[0]
    n, t_len = returns.shape
    eta = (np.eye(l_dim) - projector(gamma)) @ rddot_mean
    alpha = np.zeros((n, t_len))
    for t in range(t_len):
        x = characteristics[t]
        b = x @ gamma
        alpha[:, t] = (np.eye(n) - projector(b)) @ (x @ rddot_mean)
    return eta, alpha


def factors_breve_oracle(returns, characteristics, rddot, gamma, eta):
    """f_{t+1} = (g'g)^{-1} g' Rddot_{t+1} + (g'X'Xg)^{-1} g'X'X eta."""
    k = gamma.shape[1]
    t_len = returns.shape[1]
    out = np.zeros((k, t_len))
    for t in range(t_len):
        x = characteristics[t]
        gg = gamma.T @ gamma
        gxxg = gamma.T @ x.T @ x @ gamma
        out[:, t] = np.linalg.solve(gg, gamma.T @ rddot[:, t]) + np.linalg.solve(
            gxxg, gamma.T @ x.T @ x @ eta
        )
    return out


def sigma2_oracle(returns, characteristics, alpha_outside, alpha_inside, gamma, factors_breve):
    """sigma2_{t+1} = N^{-1} sum_i resid_{i,t+1}^2."""
    n, t_len = returns.shape
    out = np.zeros(t_len)
    for t in range(t_len):
        x = characteristics[t]
        fitted = alpha_outside[:, t] + alpha_inside[:, t] + x @ gamma @ factors_breve[:, t]
        out[t] = np.mean((returns[:, t] - fitted) ** 2)
    return out


def debias_oracle(characteristics, gamma_plain, factors_demeaned, sigma2):
    """gamma_hat = gamma - (sum_t sigma2_t (X'X)^{-1}) gamma (g'g)^{-1} (Fd Fd')^{-1}."""
    l_dim = gamma_plain.shape[0]
    acc = np.zeros((l_dim, l_dim))
    for t in range(len(characteristics)):
        x = characteristics[t]
        acc += sigma2[t] * np.linalg.inv(x.T @ x)
    correction = (
        acc
        @ gamma_plain
        @ np.linalg.inv(gamma_plain.T @ gamma_plain)
        @ np.linalg.inv(factors_demeaned @ factors_demeaned.T)
    )
    return gamma_plain - correction


def omega_simple_oracle(n, l):
    out = np.zeros((n, n - l))
    out[: n - l, :] = np.eye(n - l)
    return out


def basis_oracle(x, omega):
    """B^o = X^o (X^o' X^o / N)^{-1/2} with X^o = (I - P_X) Omega."""
    n = x.shape[0]
    xo = (np.eye(n) - projector(x)) @ omega
    return xo @ inv_sqrt_sym(xo.T @ xo / n)


def delta_raw_oracle(returns, bases):
    """delta_t = (B'B)^{-1} B' R_{t+1} solved literally (no Gram shortcut)."""
    t_len = returns.shape[1]
    q = bases[0].shape[1]
    out = np.zeros((q, t_len))
    for t in range(t_len):
        b = bases[t]
        out[:, t] = np.linalg.solve(b.T @ b, b.T @ returns[:, t])
    return out


def threshold_refine_oracle(delta_raw, rho):
    """Hard threshold deviations from the time mean, then refine the level."""
    q, t_len = delta_raw.shape
    zeta_plain = delta_raw.mean(axis=1)
    xi_tilde = np.zeros((q, t_len))
    mask = np.zeros((q, t_len), dtype=bool)
    for t in range(t_len):
        for j in range(q):
            dev = delta_raw[j, t] - zeta_plain[j]
            if abs(dev) >= rho[t] and dev != 0.0:
                xi_tilde[j, t] = dev
                mask[j, t] = True
    zeta = zeta_plain - xi_tilde.mean(axis=1)
    xi = np.zeros((q, t_len))
    for t in range(t_len):
        for j in range(q):
            if mask[j, t]:
                xi[j, t] = delta_raw[j, t] - zeta[j]
    return zeta_plain, zeta, xi, mask


def gamma_row_variance_oracle(characteristics, factors_demeaned, sigma2, l):
    """Sandwich (Qf)^{-1} [T^{-1} sum sigma2_t [Qt^{-1}]_ll fd fd'] (Qf)^{-1}."""
    n = characteristics[0].shape[0]
    t_len = factors_demeaned.shape[1]
    k = factors_demeaned.shape[0]
    qf = factors_demeaned @ factors_demeaned.T / t_len
    mid = np.zeros((k, k))
    for t in range(t_len):
        x = characteristics[t]
        qt = x.T @ x / n
        qinv_ll = np.linalg.inv(qt)[l, l]
        fd = factors_demeaned[:, t]
        mid += sigma2[t] * qinv_ll * np.outer(fd, fd)
    mid /= t_len
    qf_inv = np.linalg.inv(qf)
    return qf_inv @ mid @ qf_inv


def inside_variance_oracle(characteristics, gamma, eta, rddot_mean, factors_demeaned, sigma2):
    """V_I,it = sigma2_I,it * L / (N T), with the per-(i,t,s) sums written literally."""
    n = characteristics[0].shape[0]
    l_dim = gamma.shape[0]
    t_len = len(characteristics)
    qf = factors_demeaned @ factors_demeaned.T / t_len
    qf_inv = np.linalg.inv(qf)
    barf = np.linalg.solve(gamma.T @ gamma, gamma.T @ rddot_mean)
    out = np.zeros((n, t_len))
    for t in range(t_len):
        x = characteristics[t]
        qt = x.T @ x / n
        qt_inv = np.linalg.inv(qt)
        gqg_inv = np.linalg.inv(gamma.T @ qt @ gamma)
        b_row = eta - gamma @ gqg_inv @ gamma.T @ qt @ eta  # B-hat transpose, length L
        w = gqg_inv @ gamma.T @ qt @ eta + barf
        for i in range(n):
            xi_vec = x[i]
            a_row = qt_inv @ xi_vec - gamma @ gqg_inv @ gamma.T @ xi_vec  # A-hat'
            u = gqg_inv @ gamma.T @ xi_vec
            total = 0.0
            for s in range(t_len):
                qs = characteristics[s].T @ characteristics[s] / n
                fd = factors_demeaned[:, s]
                a_s = 1.0 - float(w @ qf_inv @ fd)
                b_s = float(u @ qf_inv @ fd)
                c = a_s * a_row - b_s * b_row
                total += sigma2[s] * float(c @ qs @ c)
            sigma2_i = total / (t_len * l_dim)
            out[i, t] = sigma2_i * l_dim / (n * t_len)
    return out


def outside_variance_oracle(bases, support_masks, sigma2):
    """(bar-s2/T)(||B_i||^2/N) + s2_{t+1} (|D|/N)(|D|^{-1} sum_{q in D} B_iq^2)."""
    n = bases[0].shape[0]
    t_len = len(bases)
    bar = np.mean(sigma2)
    out = np.zeros((n, t_len))
    for t in range(t_len):
        b = bases[t]
        d = np.flatnonzero(support_masks[:, t])
        for i in range(n):
            v = (bar / t_len) * (b[i] @ b[i] / n)
            if d.size:
                v += sigma2[t] * (d.size / n) * float(np.mean(b[i, d] ** 2))
            out[i, t] = v
    return out
