//! Marginal log-likelihoods: exact for linear mixed models, Monte-Carlo for
//! nonlinear ones, plus the paired common-random-numbers LRT estimator.

use std::collections::HashMap;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition, log_sum_exp, sym_eigen, symmetrize};
use crate::model::{Dataset, ModelSpec, PreparedModel, Theta};
pub use crate::rng::Sampler;
use crate::rng::{normal_draws, Domain};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monte-Carlo settings for the marginal likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Draws per individual.
    pub m: usize,
    pub seed: u64,
    /// Standard-error target on the LRT scale; `m` is doubled until met.
    pub target_se: Option<f64>,
    #[serde(default)]
    pub sampler: Sampler,
    /// Offset added to individual indices when keying random streams.
    #[serde(default)]
    pub unit_offset: u64,
    /// Upper bound for `m` during escalation.
    #[serde(default = "default_max_m")]
    pub max_m: usize,
}

fn default_max_m() -> usize {
    1 << 17
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { m: 10_000, seed: 1, target_se: Some(0.05), sampler: Sampler::Sobol, unit_offset: 0, max_m: default_max_m() }
    }
}

impl McConfig {
    pub fn new(m: usize, seed: u64) -> Self {
        McConfig { m, seed, target_se: None, ..McConfig::default() }
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("Monte-Carlo sample size must be at least 1"));
        }
        Ok(())
    }
}

/// Exact marginal log-likelihood of a linear mixed model.
pub fn loglik_linear(theta: &Theta, model: &ModelSpec, data: &Dataset) -> Result<f64> {
    let prepared = model.prepare(data)?;
    Ok(LinearStats::new(&prepared)?.eval(theta, false)?.0)
}

/// Exact log-likelihood and its gradient in the flat parameter ordering.
pub fn loglik_linear_grad(theta: &Theta, model: &ModelSpec, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let prepared = model.prepare(data)?;
    let (v, g) = LinearStats::new(&prepared)?.eval(theta, true)?;
    Ok((v, g.expect("gradient requested").flatten(model)))
}

/// Monte-Carlo marginal log-likelihood `Σ_i log L̂_i` and its delta-method standard error.
pub fn loglik_mc(theta: &Theta, model: &ModelSpec, data: &Dataset, mc: &McConfig) -> Result<(f64, f64)> {
    mc.validate()?;
    let prepared = model.prepare(data)?;
    let engine = McEngine::new(prepared, mc)?;
    let units = engine.units(theta)?;
    let value = units.iter().map(|u| u.0).sum();
    let var: f64 = units.iter().map(|u| u.1).sum();
    Ok((value, var.sqrt()))
}

/// Paired LRT estimate `-2 Σ_i log(L̂_i(θ0) / L̂_i(θ1))` using the same draws
/// for both parameter values, with its standard error.
pub fn lrt_statistic_mc(
    theta0: &Theta,
    theta1: &Theta,
    model: &ModelSpec,
    data: &Dataset,
    mc: &McConfig,
) -> Result<(f64, f64)> {
    mc.validate()?;
    let mut cfg = mc.clone();
    loop {
        let prepared = model.prepare(data)?;
        let engine = McEngine::new(prepared, &cfg)?;
        let (lrt, se) = engine.paired_lrt(theta0, theta1)?;
        match cfg.target_se {
            Some(target) if se > target && cfg.m * 2 <= cfg.max_m => cfg.m *= 2,
            _ => return Ok((lrt, se)),
        }
    }
}

/// Gradient of the log-likelihood with respect to `(β, Γ, σ²)`; `gamma` is
/// the symmetric matrix derivative `∂ℓ/∂Γ` (each entry counted once).
#[derive(Debug, Clone)]
pub(crate) struct ThetaGrad {
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
}

impl ThetaGrad {
    fn zeros(p: usize) -> Self {
        ThetaGrad { beta: DVector::zeros(p), gamma: DMatrix::zeros(p, p), sigma2: 0.0 }
    }

    /// Gradient in the flat ordering: an off-diagonal parameter moves both
    /// symmetric entries.
    pub fn flatten(&self, model: &ModelSpec) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        for (i, j) in model.structure.param_positions(model.p) {
            v.push(if i == j { self.gamma[(i, j)] } else { 2.0 * self.gamma[(i, j)] });
        }
        v.push(self.sigma2);
        v
    }
}

struct Group {
    x: DMatrix<f64>,
    n: f64,
    ybar: DVector<f64>,
    scatter: DMatrix<f64>,
}

/// Sufficient statistics of a linear model, grouped by identical design.
pub(crate) struct LinearStats {
    groups: Vec<Group>,
    pub n: usize,
}

impl LinearStats {
    pub fn new(prepared: &PreparedModel<'_>) -> Result<Self> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut designs: Vec<DMatrix<f64>> = Vec::new();
        for i in 0..prepared.n() {
            let x = prepared.design(i).ok_or_else(|| Error::invalid("exact likelihood requires a linear model"))?;
            let mut key: Vec<u64> = vec![x.nrows() as u64];
            key.extend(x.iter().map(|v| v.to_bits()));
            let slot = *index.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                designs.push(x.clone());
                members.len() - 1
            });
            members[slot].push(i);
        }
        let groups = members
            .into_iter()
            .zip(designs)
            .map(|(ids, x)| {
                let j = x.nrows();
                let n = ids.len() as f64;
                let mut ybar = DVector::zeros(j);
                for &i in &ids {
                    ybar += DVector::from_column_slice(prepared.observations(i));
                }
                ybar /= n;
                let mut scatter = DMatrix::zeros(j, j);
                for &i in &ids {
                    let d = DVector::from_column_slice(prepared.observations(i)) - &ybar;
                    scatter.ger(1.0, &d, &d, 1.0);
                }
                Group { x, n, ybar, scatter }
            })
            .collect();
        Ok(LinearStats { groups, n: prepared.n() })
    }

    pub fn eval(&self, theta: &Theta, want_grad: bool) -> Result<(f64, Option<ThetaGrad>)> {
        let p = theta.p();
        let mut value = 0.0;
        let mut grad = want_grad.then(|| ThetaGrad::zeros(p));
        for g in &self.groups {
            let j = g.x.nrows();
            let omega = &g.x * &theta.gamma * g.x.transpose() + DMatrix::identity(j, j) * theta.sigma2;
            let chol = omega.clone().cholesky().ok_or_else(|| {
                Error::numeric(format!(
                    "marginal covariance is numerically singular (condition {:.3e})",
                    condition(&omega)
                ))
            })?;
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let inv = chol.inverse();
            let d = &g.ybar - &g.x * &theta.beta;
            let mut a = g.scatter.clone();
            a.ger(g.n, &d, &d, 1.0);
            let inv_a = &inv * &a;
            value -= 0.5 * (g.n * logdet + inv_a.trace() + g.n * j as f64 * LN_2PI);
            if let Some(grad) = grad.as_mut() {
                let g_omega = symmetrize(&((&inv_a * &inv - &inv * g.n) * 0.5));
                grad.beta += g.x.transpose() * (&inv * &d) * g.n;
                grad.gamma += g.x.transpose() * &g_omega * &g.x;
                grad.sigma2 += g_omega.trace();
            }
        }
        if !value.is_finite() {
            return Err(Error::numeric("log-likelihood is not finite"));
        }
        Ok((value, grad))
    }
}

/// Fixed Monte-Carlo draws bound to a prepared model.
pub(crate) struct McEngine<'a> {
    pub prepared: PreparedModel<'a>,
    draws: Vec<Vec<f64>>,
    m: usize,
}

struct UnitEval {
    logl: f64,
    var: f64,
    grad: Option<(DVector<f64>, DMatrix<f64>, f64)>,
}

/// `S = Γ^{1/2}` with its eigenbasis.
struct SqrtFactor {
    s: DMatrix<f64>,
    vals: DVector<f64>,
    vecs: DMatrix<f64>,
}

impl SqrtFactor {
    fn new(gamma: &DMatrix<f64>) -> Self {
        let (vals, vecs) = sym_eigen(gamma);
        let vals = vals.map(|v| v.max(0.0).sqrt());
        let s = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        SqrtFactor { s, vals, vecs }
    }

    /// Maps `∂ℓ/∂S` (unsymmetrized) to the symmetric `∂ℓ/∂Γ` by solving
    /// `S G + G S = sym(H)` in the eigenbasis.
    fn pullback(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let hs = symmetrize(h);
        let mut t = self.vecs.transpose() * hs * &self.vecs;
        let p = t.nrows();
        for k in 0..p {
            for l in 0..p {
                let den = self.vals[k] + self.vals[l];
                t[(k, l)] = if den > 1e-300 { t[(k, l)] / den } else { 0.0 };
            }
        }
        &self.vecs * t * self.vecs.transpose()
    }
}

impl<'a> McEngine<'a> {
    pub fn new(prepared: PreparedModel<'a>, mc: &McConfig) -> Result<Self> {
        mc.validate()?;
        let p = prepared.p();
        let n = prepared.n();
        let draws = (0..n)
            .into_par_iter()
            .map(|i| normal_draws(mc.sampler, mc.seed, Domain::Likelihood, mc.unit_offset + i as u64, mc.m, p))
            .collect();
        Ok(McEngine { prepared, draws, m: mc.m })
    }

    fn log_f(&self, i: usize, theta: &Theta, s: &DMatrix<f64>, out: &mut [f64]) {
        let p = self.prepared.p();
        let y = self.prepared.observations(i);
        let j = y.len();
        let norm = j as f64 * (LN_2PI + theta.sigma2.ln());
        let z = &self.draws[i];
        let mut phi = vec![0.0; p];
        let mut mean = vec![0.0; j];
        for (m, lf) in out.iter_mut().enumerate() {
            let zm = &z[m * p..(m + 1) * p];
            for k in 0..p {
                phi[k] = theta.beta[k] + (0..p).map(|l| s[(k, l)] * zm[l]).sum::<f64>();
            }
            self.prepared.mean_into(i, &phi, &mut mean, None);
            let rss: f64 = y.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            *lf = -0.5 * (norm + rss / theta.sigma2);
        }
    }

    fn unit(&self, i: usize, theta: &Theta, sq: &SqrtFactor, want_grad: bool) -> UnitEval {
        let p = self.prepared.p();
        let y = self.prepared.observations(i);
        let j = y.len();
        let m_count = self.m;
        let mut logf = vec![0.0; m_count];
        if !want_grad {
            self.log_f(i, theta, &sq.s, &mut logf);
            let (logl, var) = summarize(&logf);
            return UnitEval { logl, var, grad: None };
        }
        let s = &sq.s;
        let z = &self.draws[i];
        let norm = j as f64 * (LN_2PI + theta.sigma2.ln());
        let mut phi = vec![0.0; p];
        let mut mean = vec![0.0; j];
        let mut jac = vec![0.0; j * p];
        let mut score_phi = vec![0.0; m_count * p];
        let mut rss_all = vec![0.0; m_count];
        for m in 0..m_count {
            let zm = &z[m * p..(m + 1) * p];
            for k in 0..p {
                phi[k] = theta.beta[k] + (0..p).map(|l| s[(k, l)] * zm[l]).sum::<f64>();
            }
            self.prepared.mean_into(i, &phi, &mut mean, Some(&mut jac));
            let mut rss = 0.0;
            let a = &mut score_phi[m * p..(m + 1) * p];
            for r in 0..j {
                let e = y[r] - mean[r];
                rss += e * e;
                for k in 0..p {
                    a[k] += jac[r * p + k] * e / theta.sigma2;
                }
            }
            rss_all[m] = rss;
            logf[m] = -0.5 * (norm + rss / theta.sigma2);
        }
        let (logl, var) = summarize(&logf);
        let lse = logl + (m_count as f64).ln();
        let mut gb = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut gs = 0.0;
        for m in 0..m_count {
            let w = (logf[m] - lse).exp();
            if w == 0.0 {
                continue;
            }
            let a = &score_phi[m * p..(m + 1) * p];
            let zm = &z[m * p..(m + 1) * p];
            for k in 0..p {
                gb[k] += w * a[k];
                for l in 0..p {
                    h[(k, l)] += w * a[k] * zm[l];
                }
            }
            gs += w * (-(j as f64) / (2.0 * theta.sigma2) + rss_all[m] / (2.0 * theta.sigma2 * theta.sigma2));
        }
        UnitEval { logl, var, grad: Some((gb, h, gs)) }
    }

    /// Per-individual `(log L̂_i, var(log L̂_i))`.
    pub fn units(&self, theta: &Theta) -> Result<Vec<(f64, f64)>> {
        let sq = SqrtFactor::new(&theta.gamma);
        let out: Vec<(f64, f64)> = (0..self.prepared.n())
            .into_par_iter()
            .map(|i| {
                let u = self.unit(i, theta, &sq, false);
                (u.logl, u.var)
            })
            .collect();
        if out.iter().any(|u| !u.0.is_finite()) {
            return Err(Error::numeric(
                "Monte-Carlo likelihood underflowed even in the log domain for some individual",
            ));
        }
        Ok(out)
    }

    pub fn eval(&self, theta: &Theta, want_grad: bool) -> Result<(f64, Option<ThetaGrad>)> {
        let p = self.prepared.p();
        let sq = SqrtFactor::new(&theta.gamma);
        let units: Vec<UnitEval> =
            (0..self.prepared.n()).into_par_iter().map(|i| self.unit(i, theta, &sq, want_grad)).collect();
        let value: f64 = units.iter().map(|u| u.logl).sum();
        if !value.is_finite() {
            return Err(Error::numeric("Monte-Carlo log-likelihood is not finite"));
        }
        if !want_grad {
            return Ok((value, None));
        }
        let mut total = ThetaGrad::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for u in &units {
            let (gb, hu, gs) = u.grad.as_ref().expect("gradient requested");
            total.beta += gb;
            h += hu;
            total.sigma2 += gs;
        }
        total.gamma = sq.pullback(&h);
        Ok((value, Some(total)))
    }

    pub fn paired_lrt(&self, theta0: &Theta, theta1: &Theta) -> Result<(f64, f64)> {
        let s0 = SqrtFactor::new(&theta0.gamma).s;
        let s1 = SqrtFactor::new(&theta1.gamma).s;
        let terms: Vec<(f64, f64)> = (0..self.prepared.n())
            .into_par_iter()
            .map(|i| {
                let mut f0 = vec![0.0; self.m];
                let mut f1 = vec![0.0; self.m];
                self.log_f(i, theta0, &s0, &mut f0);
                self.log_f(i, theta1, &s1, &mut f1);
                paired_term(&f0, &f1)
            })
            .collect();
        let d: f64 = terms.iter().map(|t| t.0).sum();
        if !d.is_finite() {
            return Err(Error::numeric("Monte-Carlo likelihood ratio is not finite"));
        }
        let var: f64 = terms.iter().map(|t| t.1).sum();
        Ok((-2.0 * d, 2.0 * var.sqrt()))
    }
}

/// `(log mean exp(v), delta-method variance of that log-mean)`.
fn summarize(logf: &[f64]) -> (f64, f64) {
    let m = logf.len() as f64;
    let lse = log_sum_exp(logf);
    let logl = lse - m.ln();
    if logf.len() < 2 || !lse.is_finite() {
        return (logl, f64::INFINITY);
    }
    let max = logf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logf.iter().map(|v| (v - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / m;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (logl, var / (m * mean * mean))
}

fn paired_term(f0: &[f64], f1: &[f64]) -> (f64, f64) {
    let m = f0.len() as f64;
    let d = log_sum_exp(f0) - log_sum_exp(f1);
    if f0.len() < 2 {
        return (d, f64::INFINITY);
    }
    let (m0, m1) = (
        f0.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        f1.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let w0: Vec<f64> = f0.iter().map(|v| (v - m0).exp()).collect();
    let w1: Vec<f64> = f1.iter().map(|v| (v - m1).exp()).collect();
    let a = w0.iter().sum::<f64>() / m;
    let b = w1.iter().sum::<f64>() / m;
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for (x, y) in w0.iter().zip(&w1) {
        vaa += (x - a) * (x - a);
        vbb += (y - b) * (y - b);
        vab += (x - a) * (y - b);
    }
    let k = 1.0 / (m - 1.0);
    let var = (vaa * k / (a * a) + vbb * k / (b * b) - 2.0 * vab * k / (a * b)) / m;
    (d, var.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::model::{CovStructure, Individual};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_loglik_iid(resid: &[f64], sigma2: f64) -> f64 {
        -0.5 * resid.iter().map(|r| r * r / sigma2 + (2.0 * PI * sigma2).ln()).sum::<f64>()
    }

    fn small_linear_data(n: usize, j: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let individuals = (0..n)
            .map(|i| {
                let b0 = 1.0 + 0.8 * nd.sample(&mut rng);
                let b1 = 0.5 + 0.4 * nd.sample(&mut rng);
                let x: Vec<f64> = (1..=j).map(|t| t as f64).collect();
                let y = x.iter().map(|xv| b0 + b1 * xv + 0.7 * nd.sample(&mut rng)).collect();
                Individual::new(format!("i{i}"), x, y).unwrap()
            })
            .collect();
        Dataset::new(individuals).unwrap()
    }

    fn theta2() -> Theta {
        Theta::new(
            DVector::from_vec(vec![1.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.64, 0.1, 0.1, 0.16]),
            0.49,
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_single_observation() {
        let model = ModelSpec::linear(1, CovStructure::Diagonal).unwrap();
        let data = Dataset::new(vec![Individual::new("a", vec![0.0], vec![0.0]).unwrap()]).unwrap();
        let theta = Theta::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1.0).unwrap();
        let v = loglik_linear(&theta, &model, &data).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_gamma_is_least_squares_likelihood() {
        let data = small_linear_data(4, 3, 1);
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let mut theta = theta2();
        theta.gamma = DMatrix::zeros(2, 2);
        let v = loglik_linear(&theta, &model, &data).unwrap();
        let resid: Vec<f64> = data
            .individuals
            .iter()
            .flat_map(|ind| ind.x.iter().zip(&ind.y).map(|(x, y)| y - 1.0 - 0.5 * x).collect::<Vec<_>>())
            .collect();
        assert!((v - gaussian_loglik_iid(&resid, 0.49)).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let data = small_linear_data(6, 4, 2);
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let theta = theta2();
        let (_, g) = loglik_linear_grad(&theta, &model, &data).unwrap();
        let flat = theta.flatten(&model.structure);
        for a in 0..flat.len() {
            let h = 1e-6 * (1.0 + flat[a].abs());
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[a] += h;
            dn[a] -= h;
            let fu = loglik_linear(&Theta::unflatten(&up, &model.structure, 2).unwrap(), &model, &data).unwrap();
            let fd = loglik_linear(&Theta::unflatten(&dn, &model.structure, 2).unwrap(), &model, &data).unwrap();
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g[a]).abs() < 1e-5 * (1.0 + num.abs()), "coord {a}: {num} vs {}", g[a]);
        }
    }

    #[test]
    fn mc_gradient_matches_differences_on_fixed_draws() {
        let data = small_linear_data(5, 3, 3);
        let model = ModelSpec::quadratic(2, CovStructure::Full).unwrap();
        let mc = McConfig::new(64, 5);
        let prepared = model.prepare(&data).unwrap();
        let engine = McEngine::new(prepared, &mc).unwrap();
        let theta = theta2();
        let (_, g) = engine.eval(&theta, true).unwrap();
        let g = g.unwrap().flatten(&model);
        let flat = theta.flatten(&model.structure);
        for a in 0..flat.len() {
            let h = 1e-6 * (1.0 + flat[a].abs());
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[a] += h;
            dn[a] -= h;
            let fu = engine.eval(&Theta::unflatten(&up, &model.structure, 2).unwrap(), false).unwrap().0;
            let fd = engine.eval(&Theta::unflatten(&dn, &model.structure, 2).unwrap(), false).unwrap().0;
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g[a]).abs() < 1e-4 * (1.0 + num.abs()), "coord {a}: {num} vs {}", g[a]);
        }
    }

    #[test]
    fn zero_gamma_makes_mc_exact() {
        let data = small_linear_data(4, 3, 4);
        let model = ModelSpec::linear(2, CovStructure::Diagonal).unwrap();
        let mut theta = theta2();
        theta.gamma = DMatrix::zeros(2, 2);
        let exact = loglik_linear(&theta, &model, &data).unwrap();
        for m in [1, 7, 100] {
            let (v, _) = loglik_mc(&theta, &model, &data, &McConfig::new(m, 9)).unwrap();
            assert!((v - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_parameters_give_zero_lrt() {
        let data = small_linear_data(4, 3, 5);
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let (lrt, _) = lrt_statistic_mc(&theta2(), &theta2(), &model, &data, &McConfig::new(50, 1)).unwrap();
        assert_eq!(lrt, 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = small_linear_data(4, 3, 6);
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let mut t0 = theta2();
        t0.gamma[(1, 1)] = 0.0;
        t0.gamma[(0, 1)] = 0.0;
        t0.gamma[(1, 0)] = 0.0;
        let mc = McConfig::new(200, 42);
        let a = lrt_statistic_mc(&t0, &theta2(), &model, &data, &mc).unwrap();
        let b = lrt_statistic_mc(&t0, &theta2(), &model, &data, &mc).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn likelihood_factorizes_over_individuals() {
        let a = small_linear_data(3, 3, 7);
        let b = small_linear_data(4, 3, 8);
        let ab = a.concat(&b).unwrap();
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let t = theta2();
        let exact = loglik_linear(&t, &model, &a).unwrap() + loglik_linear(&t, &model, &b).unwrap();
        assert!((loglik_linear(&t, &model, &ab).unwrap() - exact).abs() < 1e-9);

        let mc = McConfig::new(128, 3);
        let va = loglik_mc(&t, &model, &a, &mc).unwrap().0;
        let vb = loglik_mc(&t, &model, &b, &McConfig { unit_offset: 3, ..mc.clone() }).unwrap().0;
        let vab = loglik_mc(&t, &model, &ab, &mc).unwrap().0;
        assert!((va + vb - vab).abs() < 1e-9);
    }

    #[test]
    fn permutation_leaves_likelihood_unchanged() {
        use crate::model::{permute_to_tested_last, HypothesisSpec};
        let data = small_linear_data(5, 4, 9);
        let model = ModelSpec::linear(2, CovStructure::Full).unwrap();
        let (pt, perm) = permute_to_tested_last(&theta2(), &HypothesisSpec::new(vec![0])).unwrap();
        let pmodel = model.permuted(&perm).unwrap();
        let a = loglik_linear(&theta2(), &model, &data).unwrap();
        let b = loglik_linear(&pt, &pmodel, &data).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn underflowing_densities_stay_finite() {
        let model = ModelSpec::logistic(3, CovStructure::Diagonal).unwrap();
        let x: Vec<f64> = (0..25).map(|k| 50.0 + 50.0 * k as f64).collect();
        let y: Vec<f64> = x.iter().map(|_| 1e4).collect();
        let data = Dataset::new(vec![Individual::new("far", x, y).unwrap()]).unwrap();
        let theta = Theta::new(
            DVector::from_vec(vec![200.0, 500.0, 150.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 100.0, 10.0])),
            1.0,
        )
        .unwrap();
        let (v, _) = loglik_mc(&theta, &model, &data, &McConfig::new(64, 1)).unwrap();
        assert!(v.is_finite() && v < -1e6);
    }
}
