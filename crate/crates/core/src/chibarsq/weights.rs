//! Chi-bar-square weights: closed forms for small orthants and Monte-Carlo
//! estimates for general cones.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::cone::{psd_block, Cone, ConeFactor, Projector};
use super::{ChiBarSq, WeightSource};
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, symmetrize};
use crate::rng::{substream, Domain};

const CHUNK: usize = 2048;
/// Largest fraction of draws whose projection may fail before giving up.
const MAX_FAIL_FRACTION: f64 = 1e-3;

fn check_rho(r: f64) -> Result<f64> {
    if !r.is_finite() || r.abs() >= 1.0 - 1e-12 {
        return Err(Error::numeric(format!("correlation {r} is degenerate (|rho| = 1)")));
    }
    Ok(r)
}

/// Exact weights over `χ²₀..χ²_r` for an `r`-dimensional orthant, `r ≤ 3`,
/// from the correlation matrix of the tested coordinates.
pub fn weights_closed_form(c: &DMatrix<f64>) -> Result<ChiBarSq> {
    let r = c.nrows();
    if c.ncols() != r {
        return Err(Error::dim("correlation matrix must be square"));
    }
    for i in 0..r {
        if (c[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::invalid("correlation matrix must have a unit diagonal"));
        }
        for j in 0..i {
            if (c[(i, j)] - c[(j, i)]).abs() > 1e-10 {
                return Err(Error::invalid("correlation matrix is not symmetric"));
            }
        }
    }
    let w = match r {
        1 => vec![0.5, 0.5],
        2 => {
            let rho = check_rho(c[(0, 1)])?;
            let w0 = rho.acos() / (2.0 * PI);
            vec![w0, 0.5, 0.5 - w0]
        }
        3 => {
            let r12 = check_rho(c[(0, 1)])?;
            let r13 = check_rho(c[(0, 2)])?;
            let r23 = check_rho(c[(1, 2)])?;
            let partial = |ij: f64, ik: f64, jk: f64| -> Result<f64> {
                check_rho((ij - ik * jk) / ((1.0 - ik * ik) * (1.0 - jk * jk)).sqrt())
            };
            let p12 = partial(r12, r13, r23)?;
            let p13 = partial(r13, r12, r23)?;
            let p23 = partial(r23, r12, r13)?;
            let w3 = (2.0 * PI - r12.acos() - r13.acos() - r23.acos()) / (4.0 * PI);
            let w2 = (3.0 * PI - p12.acos() - p13.acos() - p23.acos()) / (4.0 * PI);
            vec![0.5 - w2, 0.5 - w3, w2, w3]
        }
        _ => {
            return Err(Error::invalid(format!(
                "closed-form weights need 1 to 3 tested variances, got {r}"
            )))
        }
    };
    ChiBarSq::new(w.into_iter().map(|v: f64| v.max(0.0)).collect(), WeightSource::ClosedForm)
}

/// Cholesky factor used to draw `Z ~ N(0, V)`.
fn normal_factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(v)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::numeric("covariance of the limiting law is not positive definite"))
}

/// Draws `n` projections in parallel, passing each `(z, projection,
/// distance²)` to `f`. Chunks are keyed so the result does not depend on
/// the thread count. Returns the per-draw outputs of `f` (failures dropped)
/// and the number of failed projections.
fn map_draws<T: Send>(
    cone: &Cone,
    v: &DMatrix<f64>,
    n: usize,
    seed: u64,
    domain: Domain,
    f: impl Fn(&Projector, &[f64], &[f64], f64) -> T + Sync,
) -> Result<(Vec<T>, usize)> {
    if n == 0 {
        return Err(Error::invalid("number of Monte-Carlo draws must be positive"));
    }
    let projector = Projector::new(cone, v)?;
    let l = normal_factor(v)?;
    let q = cone.total_dim;
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<(Vec<T>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, domain, c as u64, 0);
            let size = CHUNK.min(n - c * CHUNK);
            let mut out = Vec::with_capacity(size);
            let mut failed = 0;
            let mut e = vec![0.0; q];
            for _ in 0..size {
                for x in e.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
                let z: Vec<f64> = (0..q).map(|i| (0..=i).map(|j| l[(i, j)] * e[j]).sum()).collect();
                match projector.project(&z) {
                    Ok((proj, d2)) => out.push(f(&projector, &z, &proj, d2)),
                    Err(_) => failed += 1,
                }
            }
            (out, failed)
        })
        .collect();
    let failed: usize = parts.iter().map(|p| p.1).sum();
    if failed as f64 > MAX_FAIL_FRACTION * n as f64 {
        return Err(Error::Convergence(format!("cone projection failed on {failed} of {n} draws")));
    }
    Ok((parts.into_iter().flat_map(|p| p.0).collect(), failed))
}

/// Effective dimension of a projected point: positive orthant coordinates,
/// the rank of each PSD block and the full dimension of free factors.
pub(crate) fn effective_dim(cone: &Cone, proj: &[f64]) -> usize {
    let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-8 * norm;
    cone.factors
        .iter()
        .map(|f| match f {
            ConeFactor::Zero { .. } => 0,
            ConeFactor::Free { indices } => indices.len(),
            ConeFactor::Orthant { indices } => indices.iter().filter(|&&i| proj[i] > tol).count(),
            ConeFactor::Psd { order, indices } => {
                let vals: Vec<f64> = indices.iter().map(|&i| proj[i]).collect();
                let (eig, _) = sym_eigen(&psd_block(*order, &vals));
                let max = eig.max();
                if max <= tol {
                    0
                } else {
                    eig.iter().filter(|&&e| e > 1e-8 * max).count()
                }
            }
        })
        .sum()
}

/// Monte-Carlo weights: the share of draws `Z ~ N(0, V)` whose projection on
/// the cone has each effective dimension, with binomial standard errors.
pub fn weights_mc(cone: &Cone, v: &DMatrix<f64>, n: usize, seed: u64) -> Result<ChiBarSq> {
    let (dims, _) = map_draws(cone, v, n, seed, Domain::Weights, |_, _, proj, _| effective_dim(cone, proj))?;
    let k = dims.len() as f64;
    let mut counts = vec![0usize; cone.max_df() + 1];
    for d in dims {
        counts[d] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / k).collect();
    let se = weights.iter().map(|w| (w * (1.0 - w) / k).sqrt()).collect();
    ChiBarSq::new(weights, WeightSource::MonteCarlo { n_samples: k as usize, se })
}

/// `n` draws of `ZᵗV⁻¹Z − min_{θ∈C}(Z−θ)ᵗV⁻¹(Z−θ)`.
pub fn chibar_sample_stats(cone: &Cone, v: &DMatrix<f64>, n: usize, seed: u64) -> Result<Vec<f64>> {
    let (stats, _) = map_draws(cone, v, n, seed, Domain::Tail, |proj, z, _, d2| {
        let m = proj.metric();
        let q = z.len();
        let zz: f64 = (0..q).map(|i| z[i] * (0..q).map(|j| m[(i, j)] * z[j]).sum::<f64>()).sum();
        (zz - d2).max(0.0)
    })?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr2(rho: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])
    }

    #[test]
    fn closed_form_reference_values() {
        assert_eq!(weights_closed_form(&DMatrix::identity(1, 1)).unwrap().weights, vec![0.5, 0.5]);
        let w = weights_closed_form(&corr2(0.0)).unwrap().weights;
        for (a, b) in w.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = weights_closed_form(&DMatrix::identity(3, 3)).unwrap().weights;
        for (a, b) in w.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = weights_closed_form(&corr2(0.644)).unwrap().weights;
        assert!((w[0] - 0.139).abs() < 5e-4 && (w[2] - 0.361).abs() < 5e-4, "{w:?}");
    }

    #[test]
    fn closed_form_rejects_degenerate() {
        assert!(weights_closed_form(&corr2(1.0)).is_err());
        assert!(weights_closed_form(&DMatrix::identity(4, 4)).is_err());
    }

    #[test]
    fn polar_cone_symmetry() {
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.8] {
            let a = weights_closed_form(&corr2(rho)).unwrap().weights;
            let b = weights_closed_form(&corr2(-rho)).unwrap().weights;
            assert!((a[0] - b[2]).abs() < 1e-14);
        }
    }

    #[test]
    fn three_dim_weights_sum_to_one_and_match_mc() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 1.0, 0.5, -0.2, 0.5, 1.0]);
        let exact = weights_closed_form(&c).unwrap();
        assert!((exact.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mc = weights_mc(&Cone::orthant(3), &c, 40_000, 9).unwrap();
        let se = mc.se().unwrap();
        for i in 0..4 {
            assert!((mc.weights[i] - exact.weights[i]).abs() < 4.0 * se[i] + 1e-12, "{i}");
        }
    }

    #[test]
    fn half_line_weights() {
        let mc = weights_mc(&Cone::orthant(1), &DMatrix::identity(1, 1), 20_000, 1).unwrap();
        let se = mc.se().unwrap();
        assert!((mc.weights[0] - 0.5).abs() < 4.0 * se[0]);
    }

    #[test]
    fn degenerate_cones_give_degenerate_statistics() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let zero = Cone::parse("zero:2").unwrap();
        assert!(chibar_sample_stats(&zero, &v, 100, 1).unwrap().iter().all(|&s| s == 0.0));
        let free = Cone::parse("free:2").unwrap();
        let s = chibar_sample_stats(&free, &v, 20_000, 1).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 2.0).abs() < 0.06);
    }

    #[test]
    fn free_psd_support() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let w = weights_mc(&Cone::parse("free:1,psd:1").unwrap(), &v, 20_000, 3).unwrap();
        assert_eq!(w.weights[0], 0.0);
        let se = w.se().unwrap();
        assert!((w.weights[1] - 0.5).abs() < 4.0 * se[1]);
    }

    #[test]
    fn draws_do_not_depend_on_thread_count() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let a = chibar_sample_stats(&Cone::orthant(2), &v, 5000, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| chibar_sample_stats(&Cone::orthant(2), &v, 5000, 11).unwrap());
        assert_eq!(a, b);
    }
}
