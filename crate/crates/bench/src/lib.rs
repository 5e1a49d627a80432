//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use varcomp_core::simlab::{generate, ScenarioSpec};
use varcomp_core::{CovStructure, Dataset, Result};

/// One dataset of the linear scenario with `n` individuals.
pub fn linear_data(n: usize) -> Result<(ScenarioSpec, Dataset)> {
    let mut spec = ScenarioSpec::m1(2, CovStructure::Full, &[1], true)?;
    spec.n = n;
    let data = generate(&spec, 0)?;
    Ok((spec, data))
}

/// One dataset of the logistic scenario with `n` individuals.
pub fn logistic_data(n: usize) -> Result<(ScenarioSpec, Dataset)> {
    let mut spec = ScenarioSpec::m2(2, CovStructure::Diagonal, false, 0.0)?;
    spec.n = n;
    let data = generate(&spec, 0)?;
    Ok((spec, data))
}

/// Equicorrelated `k × k` covariance.
pub fn equicorrelated(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
}
