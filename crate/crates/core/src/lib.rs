//! Nonlinear quantile mixed models.
//!
//! Conditional quantile curves `f(φ, x)` whose parameter mixes fixed and
//! cluster-level random effects, `φ_ij = F_ij β + G_ij u_i`, are fitted by
//! maximizing a Laplacian approximation of an asymmetric-Laplace likelihood
//! in which the check loss is replaced by a smooth surrogate whose bandwidth
//! is driven towards zero.

pub mod datasets;
pub mod error;
pub mod fitter;
pub mod inference;
pub mod likelihood;
pub mod loss;
pub mod model;
pub mod optimize;
pub mod remode;
pub mod simulate;
pub mod types;

pub use error::{Error, Result};
pub use fitter::{fit, nlrq_fit, starting_values, FitControl, NlrqFit, StartSource, StartingValues};
pub use inference::{cluster_bootstrap, BootstrapResult};
pub use likelihood::{laplace_loglik, profiled_loglik, LikelihoodProblem, ProfiledLoglik};
pub use model::{builtin_biexp, builtin_by_name, builtin_logistic3, builtin_logistic4, DesignMap, ModelSpec, PhiSpec, QuantileModel};
pub use simulate::{gen_scenario, run_study, summarize_to_table, Estimator, ScenarioSpec, StudySummary};
pub use types::{
    materialize_psi, precision_factor, Cluster, ClusteredDataset, CovarianceStructure, FitResult,
    OptimizerKind, QuantileLevel, ScaledCovariance, ThetaVector, TraceRecord, VarianceSpec,
};
