"""Conformal prediction-powered inference.

Calibrated set-predictors impute missing labels; the library turns those
imputations into valid confidence intervals for means and Z/M-estimands and
into anytime-valid e-processes, with privacy-aware and online calibration
backends.
"""

from .bounds import OneSidedBound, clt_bound, hoeffding_bound, normal_cdf, normal_inverse_cdf
from .conformal import (
    CalibratedPredictor,
    ConformityScore,
    OnlineCalibratorState,
    absolute_residual_score,
    dp_calibrate,
    empirical_err,
    negative_probability_score,
    online_update,
    predict_set,
    predict_sets,
    split_calibrate,
    split_threshold,
)
from .datamodel import (
    BoundedFunctional,
    Dataset,
    EmptySetError,
    FiniteSet,
    Interval,
    LabelSchema,
    PredictionSet,
    SchemaError,
    affine_functional,
    hull_length,
    identity_functional,
    indicator_functional,
    inf_image,
    sup_image,
)
from .evalues import (
    BettingStrategy,
    EComponent,
    EProcessState,
    agrapa_bets,
    agrapa_eta,
    clamp_eta,
    cppi_step,
    eta_range,
    evalue_confidence_sequence,
    fixed_bets,
    growth_rate_err_coefficient,
    rescale,
    risk_monitor_component,
    risk_monitor_step,
    run_risk_monitor,
    ville_reject,
)
from .mean import (
    MeanCIResult,
    MultivariateMeanCI,
    brute_force_mean_sandwich,
    multivariate_mean_ci,
    ppi_mean_ci,
    width_decomposition,
)
from .simkit import (
    FiniteJoint,
    StreamConfig,
    coverage_study,
    gen_finite_joint,
    gen_poisoned_stream,
    swap_probability,
)
from .zm import (
    EstimatingFunction,
    ThetaGrid,
    ZConfidenceSet,
    m_confidence_set,
    mean_psi,
    pinball_loss_derivative,
    quantile_psi,
    squared_loss_derivative,
    z_accepts_theta,
    z_confidence_set,
)

__version__ = "0.1.0"
