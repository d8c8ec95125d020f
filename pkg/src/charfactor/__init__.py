"""Conditional latent-factor asset-pricing models with firm characteristics.

Estimates loadings instrumented by characteristics, decomposes pricing
errors into a characteristic-spanned ("inside") part and an orthogonal
("outside") part with persistent and sparse-transitory levels, debiases the
spectral loading estimator, and provides max-statistic / Wald / bootstrap
inference plus Monte Carlo study tooling.
"""

from .errors import (
    CharfactorError,
    DataError,
    DegenerateOrthoComplement,
    DegenerateSpectrum,
    IncompatibleDimensions,
    MissingColumn,
    NonPositiveWeight,
    NumericalError,
    RankDeficientCharacteristics,
    RankDeficientLoadings,
    SingularFactorGram,
    SingularVariance,
    StudyFailure,
    UnbalancedPanel,
    ZeroVariance,
)
from .factor import (
    ModelFit,
    TransformedReturns,
    debias_gamma,
    estimate_eta_alpha_inside,
    estimate_gamma_plain,
    estimate_sigma2,
    fit_r2,
    model_fit_to_dict,
    select_rank,
    transform_returns,
)
from .inference import (
    AlphaOutsideScores,
    DeltaScores,
    DenseScores,
    FdrBands,
    TestReport,
    VarianceEstimates,
    bootstrap_critical_value,
    chi2_quantile,
    compute_variances,
    delta_variance,
    estimate_gamma_row_covs,
    estimate_gamma_row_variance,
    estimate_inside_variance,
    estimate_outside_variance,
    fdr_confidence_bands,
    max_stat_test,
    normal_cdf,
    normal_quantile,
    union_bound_critical_value,
    wald_gamma_test,
)
from .outalpha import (
    OmegaSpec,
    OrthoBasis,
    OutsideAlphaFit,
    ThresholdConfig,
    basis_ops,
    build_basis,
    build_omega,
    estimate_delta_raw,
    fit_outside,
    outside_fit_to_dict,
    preliminary_sigma,
    threshold_and_refine,
)
from .panel import (
    Panel,
    PanelSchema,
    load_panel,
    rank_normalize,
    rescale_characteristics,
    validate_panel,
)
from .pipeline import FitConfig, FitResult, fit_model
from .simlab import (
    DgpConfig,
    McResult,
    TruthRecord,
    XiDesign,
    config_b1_desk,
    config_b1_full,
    config_b2_power,
    coverage_table,
    generate_panel,
    histogram_rows,
    run_coverage_study,
    run_power_study,
    standardized_errors,
)

__version__ = "0.1.0"
