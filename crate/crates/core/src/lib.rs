//! Mixed-effects random forests for high-dimensional longitudinal data.
//!
//! The response of individual `i` at time `t` is modeled as
//!
//! ```text
//! Y_i(t) = f(X_i(t)) + Z_i(t) b_i + ω_i(t) + ε
//! ```
//!
//! with an unknown mean function `f` estimated by a regression tree or random
//! forest, Gaussian random effects `b_i ~ N(0, B)`, an optional centered
//! Gaussian process `ω_i` with covariance `γ² K(s, t)` for serial correlation,
//! and i.i.d. noise `ε ~ N(0, σ²)`. Fitting alternates mean-function
//! estimation on de-biased responses with best linear unbiased prediction of
//! the random parts and closed-form variance-component updates.
//!
//! The crate provides:
//!
//! * [`data`] — the longitudinal data model, CSV loading, marginal covariance
//!   assembly and train/test splitting,
//! * [`kernel`] — serial-correlation covariance kernels (Brownian, fractional
//!   Brownian, Ornstein-Uhlenbeck),
//! * [`tree`] — randomized maximal regression trees and generalized
//!   least-squares refitting of leaf values,
//! * [`forest`] — bagged ensembles with out-of-bag error and permutation
//!   variable importance,
//! * [`em`] — the alternating fitting loop for the eight estimator variants
//!   (MERT, REEMtree, MERF, REEMforest and their stochastic counterparts),
//! * [`predict`] — out-of-sample response prediction at arbitrary times,
//! * [`sim`] — the simulation benchmark: data generation, squared-bias and
//!   prediction-error metrics, ranking stability scores.

pub mod data;
pub mod em;
pub mod error;
pub mod forest;
pub mod kernel;
pub mod predict;
pub mod rng;
pub mod sim;
pub mod tree;

pub use data::{
    load_dataset, marginal_covariance, split_train_test, BlockCovariance, IndividualBlock,
    LongitudinalDataset, Schema, VarianceComponents,
};
pub use em::{
    blup, fit, log_likelihood, select_alpha, update_variances, EmParams, FittedModel, Learner,
    LearnerParams, MeanModel, MethodSpec, RefitStrategy, SigmaUpdate,
};
pub use error::{Error, Result};
pub use forest::{fit_forest, Forest, ForestParams, OobError};
pub use kernel::KernelSpec;
pub use predict::{interpolate_omega, load_queries, PredictionQuery};
pub use sim::{
    eval_design, prediction_error, simulate_dataset, squared_bias_report, stability_score,
    stability_sweep, BiasReport, Dimension, EvalDesign, Scheme, SimulatedDataset,
    SimulationConfig,
};
pub use tree::{fit_tree, gls_refit_leaves, leaf_indicator, RegressionTree, TreeParams};
