"""End-to-end estimation pipeline tying the panel, outside, and factor stages.

Order of operations:

1. Outside pass: orthogonal-complement bases, raw delta coordinates,
   robust preliminary noise scale, thresholding, outside alphas. Uses only
   the characteristics, returns, and the Omega choice.
2. Cross-sectional transform of returns onto the characteristic space.
3. Plain spectral loading estimate at rank K (selected by the eigenvalue
   ratio when not given) plus eta / inside alphas / factor recovery.
4. Residual variances from the full decomposition, then the debiased
   loading estimate, then final residual variances under the debiased fit.
5. Optional second thresholding pass using the residual-based variances
   (off by default; one pass matches the reference procedure).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .factor import (
    ModelFit,
    TransformedReturns,
    debias_gamma,
    estimate_eta_alpha_inside,
    estimate_gamma_plain,
    estimate_sigma2,
    fit_r2,
    select_rank,
    transform_returns,
)
from .outalpha import (
    OmegaSpec,
    OutsideAlphaFit,
    ThresholdConfig,
    basis_ops,
    fit_outside,
    resolve_omega,
)
from .panel import Panel


@dataclass(frozen=True)
class FitConfig:
    k: int | None = None  # None -> eigenvalue-ratio selection
    k_max: int | None = None
    omega: OmegaSpec = field(default_factory=OmegaSpec)
    rho: ThresholdConfig = field(default_factory=lambda: ThresholdConfig.preset("empirical"))
    rethreshold: bool = False  # re-run thresholding with residual variances


@dataclass(frozen=True)
class FitResult:
    tr: TransformedReturns
    plain: ModelFit  # spectral fit, sigma2 attached
    fit: ModelFit  # debiased fit with final residual variances
    outside: OutsideAlphaFit
    bases: list
    r2: float
    k: int
    omega: OmegaSpec


def fit_model(panel: Panel, config: FitConfig | None = None) -> FitResult:
    config = config or FitConfig()
    omega = resolve_omega(panel.n, panel.l, config.omega)
    bases = basis_ops(panel, omega)
    outside = fit_outside(panel, omega, config.rho, bases=bases)

    tr = transform_returns(panel)
    k = config.k if config.k is not None else select_rank(tr, config.k_max)
    plain = estimate_gamma_plain(tr, k)
    eta, alpha_inside, breve = estimate_eta_alpha_inside(panel, tr, plain.gamma)
    plain = replace(plain, eta=eta, alpha_inside=alpha_inside, factors_breve=breve)
    sigma2_plain = estimate_sigma2(panel, plain, outside)
    plain = replace(plain, sigma2=sigma2_plain)

    fit = debias_gamma(tr, plain, panel, sigma2_plain)
    sigma2 = estimate_sigma2(panel, fit, outside)
    fit = replace(fit, sigma2=sigma2)

    if config.rethreshold:
        outside = fit_outside(panel, omega, config.rho, sigma2=sigma2, bases=bases)
        sigma2 = estimate_sigma2(panel, fit, outside)
        fit = replace(fit, sigma2=sigma2)

    return FitResult(
        tr=tr,
        plain=plain,
        fit=fit,
        outside=outside,
        bases=bases,
        r2=fit_r2(panel, fit, outside),
        k=k,
        omega=omega,
    )
