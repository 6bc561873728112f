//! Model fitting: smooth mean, null mixed models, the tensor-product
//! alternative with its PSD truncation, and error-variance estimators.

pub mod lmm;
pub mod mean;
pub mod tensor;
pub mod variance;

pub use lmm::{
    fit_null_multivariate, fit_null_univariate, NullFitMultivariate, NullFitOptions, NullFitUnivariate,
};
pub use mean::{demean, fit_mean, DemeanedOutcome, MeanFit, PenalizedCurve};
pub use tensor::{
    fit_alt_covariance, pair_objective, psd_truncate, smooth_null, AltCovariance, PairDesign, PairSolver,
    SmoothedNull, TruncationDiagnostics,
};
pub use variance::{
    estimate_error_variance_naive, estimate_error_variance_smooth, ErrorVarianceEstimate, VarianceMethod,
    VarianceOptions,
};
