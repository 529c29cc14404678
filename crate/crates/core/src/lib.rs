//! Estimation and Rao-Blackwellization for linear instrumental-variables
//! models with heteroskedastic errors and possibly weak instruments.

// `!(x <= cap)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod lar;
pub mod linalg;
pub mod normal;
pub mod reduced_form;
pub mod rng;
pub mod singular;
pub mod types;

pub use dgp::{draw_dataset, builtin_config, DgpConfig, HeteroskedasticitySpec, InstrumentDesign};
pub use error::{Error, Result};
pub use estimators::{
    fuller, optimal_iv, tsls, tsls_from_fit, two_step_gmm, unbiased_scalar, EstimatorKind, StructuralEstimate,
    VarianceConvention,
};
pub use harness::{run_experiment, ExperimentConfig, ExperimentResult};
pub use lar::{rao_blackwellize, rb_optimal_iv, rb_tsls, RBConfig};
pub use reduced_form::{fgls_reduced_form, noise_covariance, ols_reduced_form, NoiseModel, ReducedFormFit};
pub use rng::Stream;
pub use types::{Dataset, Dims, IdentificationMode, SolveMode, StructuralParams};
