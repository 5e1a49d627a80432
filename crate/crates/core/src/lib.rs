//! Likelihood ratio tests for variance components in linear and nonlinear
//! mixed-effects models.
//!
//! The pipeline fits the model under the null (tested variances and their
//! covariances fixed at zero) and under the alternative, computes the LRT
//! statistic, and compares it with its chi-bar-square limiting law built from
//! the tangent cone of the parameter space and the Fisher information.

pub mod chibarsq;
pub mod error;
pub mod estimation;
pub mod fisher;
pub mod likelihood;
pub mod linalg;
pub mod lrt;
pub mod model;
pub mod optim;
pub mod rng;
pub mod simlab;

pub use chibarsq::{
    build_cone, chibar_cdf, chibar_pvalue, chibar_quantile, chibar_sample_stat, project_cone,
    selection_matrix, weights_closed_form, weights_mc, ChiBarSq, Cone, ConeFactor, WeightSource,
};
pub use error::{Error, Result};
pub use estimation::{default_init, fit, fit_pair, fit_with, FitOptions, FitResult, InitReport};
pub use fisher::{extract_correlation, fim_linear, fim_numerical, FimMethod, FimSource, FisherInfo};
pub use likelihood::{loglik_linear, loglik_mc, lrt_statistic_mc, McConfig, Sampler};
pub use linalg::matrix_sqrt_psd;
pub use lrt::{evaluate_at_theta, run_test, LimitLaw, PvalueMethod, TestOptions, TestReport, WeightMethod};
pub use model::{
    load_dataset, parse_long_csv, permute_to_tested_last, CovStructure, Dataset, EffectPermutation,
    HypothesisSpec, Individual, LinearDesign, MeanFunction, ModelSpec, NonlinearMean, Theta,
};

/// Crate version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
