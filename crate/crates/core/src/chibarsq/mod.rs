//! Chi-bar-square distributions: mixtures `Σ wᵢ χ²ᵢ` arising as limits of
//! likelihood ratio statistics on the boundary of the parameter space.

pub(crate) mod chisq;
mod cone;
mod weights;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub use cone::{build_cone, project_cone, selection_matrix, Cone, ConeFactor};
pub use weights::{chibar_sample_stats, weights_closed_form, weights_mc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSource {
    ClosedForm,
    MonteCarlo { n_samples: usize, se: Vec<f64> },
}

/// Mixture weights `w_0..w_k` over `χ²₀..χ²_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiBarSq {
    pub weights: Vec<f64>,
    pub source: WeightSource,
}

const QUANTILE_UPPER: f64 = 1e3;
const QUANTILE_TOL: f64 = 1e-9;

impl ChiBarSq {
    pub fn new(weights: Vec<f64>, source: WeightSource) -> Result<ChiBarSq> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one weight"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        let tol = match &source {
            WeightSource::ClosedForm => 1e-12,
            WeightSource::MonteCarlo { n_samples, .. } => 3.0 / (*n_samples as f64).sqrt(),
        };
        if (total - 1.0).abs() > tol {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        if let WeightSource::MonteCarlo { se, .. } = &source {
            if se.len() != weights.len() {
                return Err(Error::dim("one standard error per weight is required"));
            }
        }
        Ok(ChiBarSq { weights, source })
    }

    /// User-supplied weights; sums within `1e-6` of one are renormalized.
    pub fn from_weights(weights: &[f64]) -> Result<ChiBarSq> {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        ChiBarSq::new(weights.iter().map(|w| w / total).collect(), WeightSource::ClosedForm)
    }

    /// Degrees of freedom carrying positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.weights.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(i, _)| i).collect()
    }

    pub fn se(&self) -> Option<&[f64]> {
        match &self.source {
            WeightSource::MonteCarlo { se, .. } => Some(se),
            WeightSource::ClosedForm => None,
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.weights.iter().enumerate().map(|(i, w)| w * chisq::cdf(i, t)).sum::<f64>().min(1.0)
    }

    /// Upper tail `P(χ̄² ≥ t)`, summed from the component survival functions.
    pub fn pvalue(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        self.weights.iter().enumerate().map(|(i, w)| w * chisq::sf(i, t)).sum::<f64>().min(1.0)
    }

    /// Smallest `q` with `cdf(q) ≥ 1 − α`; zero exactly when `w₀ ≥ 1 − α`.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        let target = 1.0 - alpha;
        if self.weights[0] >= target {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, QUANTILE_UPPER);
        if self.cdf(hi) < target {
            return Err(Error::numeric("quantile exceeds the search range"));
        }
        while hi - lo > QUANTILE_TOL {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// JSON summary with keys `weights`, `support`, `source`, `se`,
    /// `quantile` and `pvalue` (the last two when requested).
    pub fn report(&self, alpha: Option<f64>, t: Option<f64>) -> Result<serde_json::Value> {
        let source = match &self.source {
            WeightSource::ClosedForm => "closed_form",
            WeightSource::MonteCarlo { .. } => "monte_carlo",
        };
        let quantile = alpha.map(|a| self.quantile(a)).transpose()?;
        Ok(json!({
            "weights": self.weights,
            "support": self.support(),
            "source": source,
            "se": self.se(),
            "alpha": alpha,
            "quantile": quantile,
            "t": t,
            "pvalue": t.map(|t| self.pvalue(t)),
        }))
    }
}

pub fn chibar_cdf(d: &ChiBarSq, t: f64) -> f64 {
    d.cdf(t)
}

pub fn chibar_pvalue(d: &ChiBarSq, t: f64) -> f64 {
    d.pvalue(t)
}

pub fn chibar_quantile(d: &ChiBarSq, alpha: f64) -> Result<f64> {
    d.quantile(alpha)
}

/// One draw of `ZᵗV⁻¹Z − min_{θ∈C}(Z−θ)ᵗV⁻¹(Z−θ)` with `Z ~ N(0, V)`.
pub fn chibar_sample_stat(cone: &Cone, v: &DMatrix<f64>, seed: u64) -> Result<f64> {
    Ok(chibar_sample_stats(cone, v, 1, seed)?[0])
}

/// Empirical law of simulated chi-bar-square statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSample {
    sorted: Vec<f64>,
}

impl TailSample {
    pub fn new(mut samples: Vec<f64>) -> Result<TailSample> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("tail sample must be non-empty and finite"));
        }
        samples.sort_by(f64::total_cmp);
        Ok(TailSample { sorted: samples })
    }

    pub fn simulate(cone: &Cone, v: &DMatrix<f64>, n: usize, seed: u64) -> Result<TailSample> {
        TailSample::new(chibar_sample_stats(cone, v, n, seed)?)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Share of draws at or above `t`.
    pub fn pvalue(&self, t: f64) -> f64 {
        let below = self.sorted.partition_point(|&s| s < t);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    /// Empirical `1 − α` quantile.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        let n = self.sorted.len();
        let k = (((1.0 - alpha) * n as f64).ceil() as usize).clamp(1, n);
        Ok(self.sorted[k - 1])
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(w: &[f64]) -> ChiBarSq {
        ChiBarSq::from_weights(w).unwrap()
    }

    #[test]
    fn reference_quantiles() {
        assert!((law(&[0.5, 0.5]).quantile(0.05).unwrap() - 2.7055).abs() < 1e-3);
        assert!((law(&[0.0, 0.5, 0.5]).quantile(0.05).unwrap() - 5.1385).abs() < 1e-3);
        assert!((law(&[0.139, 0.5, 0.361]).quantile(0.05).unwrap() - 4.682).abs() < 1e-3);
    }

    #[test]
    fn reference_pvalues() {
        assert!((law(&[0.5, 0.5]).pvalue(3.651) - 0.028).abs() < 5e-4);
        assert!((law(&[0.0, 0.5, 0.5]).pvalue(4.178) - 0.082).abs() < 5e-4);
    }

    #[test]
    fn quantile_zero_iff_point_mass_dominates() {
        assert_eq!(law(&[0.96, 0.04]).quantile(0.05).unwrap(), 0.0);
        assert!(law(&[0.94, 0.06]).quantile(0.05).unwrap() > 0.0);
        assert!(law(&[0.5, 0.5]).quantile(1.0).is_err());
    }

    #[test]
    fn cdf_monotone_and_inverts_quantile() {
        let d = law(&[0.2, 0.3, 0.4, 0.1]);
        let mut prev = 0.0;
        for k in 0..200 {
            let c = d.cdf(k as f64 * 0.1);
            assert!(c >= prev);
            prev = c;
        }
        for a in [0.01, 0.05, 0.1, 0.5] {
            let q = d.quantile(a).unwrap();
            assert!((d.cdf(q) - (1.0 - a)).abs() < 1e-8);
        }
    }

    #[test]
    fn report_has_expected_keys() {
        let r = law(&[0.5, 0.5]).report(Some(0.05), Some(3.651)).unwrap();
        for key in ["weights", "support", "source", "se", "quantile", "pvalue"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn tail_sample_quantiles() {
        let t = TailSample::new((1..=100).map(f64::from).collect()).unwrap();
        assert_eq!(t.quantile(0.05).unwrap(), 95.0);
        assert_eq!(t.pvalue(96.0), 0.05);
        assert_eq!(t.pvalue(0.0), 1.0);
    }
}
