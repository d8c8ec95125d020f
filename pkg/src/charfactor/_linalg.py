"""Shared dense linear algebra helpers.

Policy: every (M^T M)^{-1}-style solve goes through an SPD solver that raises
instead of silently regularizing. Relative eigenvalue floor is 1e-12.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

RELATIVE_EIG_FLOOR = 1e-12

# Absolute floor for the normalized complement Gram X_o'X_o/N (spectrum in
# [0, 1]). Its smallest eigenvalue is sin^2 of the minimal angle between the
# characteristic span and the omega complement; random draws put mass deep
# into the left tail, where the basis stays numerically usable (orthonormality
# error grows like machine-eps / eigmin). Only a genuine rank collapse - an
# eigenvalue at rounding scale - should abort, so the floor sits near 100 eps
# rather than at a "comfortable" conditioning level.
COMPLEMENT_EIG_FLOOR = 2e-14


def spd_solve(a: np.ndarray, b: np.ndarray, exc: Exception) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a; raise exc when degenerate.

    Cholesky first (fast path); on failure inspect the spectrum so that truly
    rank-deficient inputs surface as the caller's domain error.
    """
    a = np.asarray(a, dtype=float)
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise exc from None
    # Cholesky succeeds on some nearly singular matrices; enforce the floor.
    d = np.diagonal(c)
    if d.min() ** 2 <= RELATIVE_EIG_FLOOR * d.max() ** 2:
        w = np.linalg.eigvalsh(a)
        if w[0] <= RELATIVE_EIG_FLOOR * max(w[-1], 0.0):
            raise exc
    b = np.asarray(b, dtype=float)
    x = scipy.linalg.cho_solve((c, True), b, check_finite=False)
    return x


def inv_spd(a: np.ndarray, exc: Exception) -> np.ndarray:
    n = a.shape[0]
    return spd_solve(a, np.eye(n), exc)


def inv_sqrt_spd(a: np.ndarray, exc: Exception, floor: float | None = None) -> np.ndarray:
    """Inverse square root via symmetric eigendecomposition.

    By default eigenvalues below RELATIVE_EIG_FLOOR x largest raise exc; an
    explicit ``floor`` switches to an absolute cutoff (for matrices whose
    scale is pinned, like the normalized complement Gram).
    """
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eigh(a)
    cutoff = floor if floor is not None else RELATIVE_EIG_FLOOR * w[-1]
    if w[-1] <= 0 or w[0] <= cutoff:
        raise exc
    return (v * (w ** -0.5)) @ v.T


def project_out(basis: np.ndarray, target: np.ndarray, exc: Exception) -> np.ndarray:
    """(I - P_basis) @ target without forming the projector."""
    coef = spd_solve(basis.T @ basis, basis.T @ target, exc)
    return target - basis @ coef
