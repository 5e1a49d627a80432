//! Chi-square distribution functions, including the degenerate χ²₀.

use statrs::function::gamma::{gamma_lr, gamma_ur};

/// `P(χ²_df ≤ t)`; χ²₀ is a point mass at zero.
pub fn cdf(df: usize, t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return 0.0;
    }
    if df == 0 {
        return 1.0;
    }
    if t == 0.0 {
        return 0.0;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    gamma_lr(df as f64 / 2.0, t / 2.0)
}

/// `P(χ²_df > t)`, computed directly so small tails keep their precision.
pub fn sf(df: usize, t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return 1.0;
    }
    if df == 0 {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, t / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_quantiles() {
        assert!((cdf(1, 3.841459) - 0.95).abs() < 1e-6);
        assert!((cdf(2, 5.991465) - 0.95).abs() < 1e-6);
        assert!((sf(3, 7.814728) - 0.05).abs() < 1e-6);
        // χ²₂ has survival exp(-t/2).
        for t in [0.1, 1.0, 10.0, 60.0] {
            assert!((sf(2, t) - (-t / 2.0).exp()).abs() < 1e-12 * (1.0 + (-t / 2.0f64).exp()));
        }
    }

    #[test]
    fn degenerate_and_edges() {
        assert_eq!(cdf(0, 0.0), 1.0);
        assert_eq!(sf(0, 0.0), 0.0);
        assert_eq!(cdf(3, 0.0), 0.0);
        assert_eq!(sf(3, -1.0), 1.0);
        assert_eq!(cdf(3, f64::INFINITY), 1.0);
    }

    #[test]
    fn cdf_and_sf_complement() {
        for df in 1..8 {
            for t in [0.01, 0.5, 2.0, 7.0, 25.0] {
                assert!((cdf(df, t) + sf(df, t) - 1.0).abs() < 1e-12);
            }
        }
    }
}
