//! Estimation of each training data source's contribution to a model
//! behavior, via randomized subset experiments.
//!
//! The pipeline: sample random subsets of the sources (offline), evaluate a
//! black-box utility on each, then regress the utilities on a featurized
//! design whose coefficients recover the average marginal effect (AME) of
//! every source at once. Sparsity makes the regression sample-efficient
//! (LASSO), knockoff columns calibrate a false-discovery-controlled
//! selection of contributing sources, and with the right choice of sampling
//! law the same machinery doubles as a sparse Shapley-value estimator.
//!
//! Module map:
//! * [`types`] / [`config`] / [`store`] — shared domain types, experiment
//!   validation, observation persistence
//! * [`sampling`] — p draws, subset masks, featurized design matrices
//! * [`oracle`] — synthetic games, a trainable poisoned classifier, and the
//!   cached offline/online evaluation split
//! * [`lasso`] — coordinate-descent solver, regularization path,
//!   cross-validation
//! * [`knockoffs`] — one-sided W statistics, selection threshold, mFDR audit
//! * [`shapley`] — exact/Monte-Carlo Shapley oracles, AME-based estimators,
//!   closed-form error bounds
//! * [`hierarchy`] — two-level sampling and the two-stage pipeline

pub mod config;
pub mod hierarchy;
pub mod knockoffs;
pub mod lasso;
pub mod oracle;
pub mod sampling;
pub mod shapley;
pub mod store;
pub mod types;

pub use config::{validate_experiment, ExperimentConfig, LambdaRule, OracleSpec};
pub use knockoffs::Selection;
pub use lasso::{CvReport, LassoFit};
pub use oracle::{PoisonedLinearTask, Query, ThresholdGame, UtilityOracle};
pub use sampling::{DesignMatrix, Featurization, SubsetSampler};
pub use shapley::{BoundReport, ShapleyVector};
pub use store::{ObservationStore, StoreHeader};
pub use types::{
    ConfigError, EstimationResult, FeatScheme, Observation, PDistribution, SourceId, SubsetMask,
};
