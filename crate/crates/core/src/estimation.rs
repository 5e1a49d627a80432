//! Maximum-likelihood fits under the alternative and under the null.
//!
//! `Γ` is parameterized as `L Lᵗ` with `L` block lower-triangular and an
//! unconstrained diagonal, so variances can reach zero exactly; tested rows of
//! `L` are dropped under the null. `σ²` is optimized on the log scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{LinearStats, McConfig, McEngine, ThetaGrad};
use crate::model::{CovStructure, Dataset, HypothesisSpec, MeanFunction, ModelSpec, NonlinearMean, PreparedModel, Theta};
use crate::optim::{bfgs, nelder_mead, StopRule};
use crate::rng::{substream, Domain};

/// Optimizer slack below which a negative H1−H0 log-likelihood gap is treated as zero.
pub const EPS_OPT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Nelder–Mead evaluations before the quasi-Newton stage; `None` picks
    /// 2000 for exact likelihoods and 0 for Monte-Carlo ones.
    pub nm_evals: Option<usize>,
    pub max_evals: usize,
    pub rel_tol: f64,
    pub stall_iters: usize,
    /// Jittered restarts tried when a fit does not converge.
    pub restarts: usize,
    /// Relative size of the multiplicative restart jitter.
    pub jitter: f64,
    pub keep_trace: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            nm_evals: None,
            max_evals: 10_000,
            rel_tol: 1e-9,
            stall_iters: 5,
            restarts: 3,
            jitter: 0.2,
            keep_trace: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub loglik: f64,
    /// Monte-Carlo standard error of `loglik` (0 for exact likelihoods).
    pub loglik_se: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub n_evals: usize,
    pub restarts_used: usize,
    /// Zero-based effects constrained to zero variance, if fitted under a null.
    pub null_tested: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub theta: Theta,
    /// Set when the data carry no spread (constant response) and unit
    /// variances were used instead.
    pub degenerate: bool,
}

pub(crate) enum Objective<'a> {
    Exact(LinearStats),
    Mc(McEngine<'a>),
}

impl<'a> Objective<'a> {
    pub fn new(prepared: PreparedModel<'a>, mc: Option<&McConfig>) -> Result<Self> {
        if prepared.model.is_linear() {
            return Ok(Objective::Exact(LinearStats::new(&prepared)?));
        }
        let mc = mc.ok_or_else(|| Error::invalid("nonlinear models require Monte-Carlo settings"))?;
        Ok(Objective::Mc(McEngine::new(prepared, mc)?))
    }

    pub fn eval(&self, theta: &Theta, grad: bool) -> Result<(f64, Option<ThetaGrad>)> {
        match self {
            Objective::Exact(s) => s.eval(theta, grad),
            Objective::Mc(e) => e.eval(theta, grad),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Objective::Exact(s) => s.n,
            Objective::Mc(e) => e.prepared.n(),
        }
    }

    fn is_exact(&self) -> bool {
        matches!(self, Objective::Exact(_))
    }

    fn se(&self, theta: &Theta) -> Result<f64> {
        match self {
            Objective::Exact(_) => Ok(0.0),
            Objective::Mc(e) => Ok(e.units(theta)?.iter().map(|u| u.1).sum::<f64>().sqrt()),
        }
    }
}

/// Layout of the optimization vector `(β, free entries of L, log σ²)`.
struct Param {
    p: usize,
    free: Vec<(usize, usize)>,
}

impl Param {
    fn new(p: usize, s: &CovStructure, h: Option<&HypothesisSpec>) -> Self {
        let tested = |k: usize| h.is_some_and(|h| h.is_tested(k));
        let free = s.param_positions(p).into_iter().filter(|&(i, j)| !tested(i) && !tested(j)).collect();
        Param { p, free }
    }

    fn lower(&self, u: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.p, self.p);
        for (k, &(i, j)) in self.free.iter().enumerate() {
            l[(i, j)] = u[self.p + k];
        }
        l
    }

    fn to_theta(&self, u: &[f64]) -> Theta {
        let l = self.lower(u);
        let mut gamma = &l * l.transpose();
        for i in 0..self.p {
            for j in 0..i {
                let v = 0.5 * (gamma[(i, j)] + gamma[(j, i)]);
                gamma[(i, j)] = v;
                gamma[(j, i)] = v;
            }
        }
        Theta { beta: DVector::from_column_slice(&u[..self.p]), gamma, sigma2: u[u.len() - 1].exp() }
    }

    fn from_theta(&self, theta: &Theta, s: &CovStructure) -> Vec<f64> {
        let mut u: Vec<f64> = theta.beta.iter().copied().collect();
        let mut l = DMatrix::zeros(self.p, self.p);
        let in_free = |i: usize| self.free.iter().any(|&(a, b)| a == i && b == i);
        for (start, len) in s.blocks(self.p) {
            let idx: Vec<usize> = (start..start + len).filter(|&k| in_free(k)).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| theta.gamma[(idx[a], idx[b])]);
            let scale = sub.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
            let mut ridge = 0.0;
            let chol = loop {
                let m = &sub + DMatrix::identity(idx.len(), idx.len()) * ridge;
                if let Some(c) = m.cholesky() {
                    break c.l();
                }
                ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
            };
            for a in 0..idx.len() {
                for b in 0..=a {
                    l[(idx[a], idx[b])] = chol[(a, b)];
                }
            }
        }
        u.extend(self.free.iter().map(|&(i, j)| l[(i, j)]));
        u.push(theta.sigma2.max(1e-300).ln());
        u
    }

    fn grad_u(&self, u: &[f64], g: &ThetaGrad, sigma2: f64) -> Vec<f64> {
        let l = self.lower(u);
        let gl = &g.gamma * &l * 2.0;
        let mut out: Vec<f64> = g.beta.iter().copied().collect();
        out.extend(self.free.iter().map(|&(i, j)| gl[(i, j)]));
        out.push(g.sigma2 * sigma2);
        out
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return None;
    }
    let sol = x.clone().svd(true, true).solve(y, 1e-12).ok()?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Starting values from simple per-individual summaries.
pub fn default_init(model: &ModelSpec, data: &Dataset, h: Option<&HypothesisSpec>) -> Result<InitReport> {
    data.validate()?;
    let p = model.p;
    let all_y: Vec<f64> = data.individuals.iter().flat_map(|i| i.y.iter().copied()).collect();
    let all_x: Vec<f64> = data.individuals.iter().flat_map(|i| i.x.iter().copied()).collect();
    let y_scale = all_y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let y0 = all_y[0];
    let degenerate = all_y.iter().all(|v| (v - y0).abs() <= 1e-12 * y_scale);

    let (beta, per_ind): (Vec<f64>, Vec<Vec<f64>>) = match &model.mean {
        MeanFunction::Nonlinear(NonlinearMean::LogisticGrowth { .. }) => {
            let x_range = all_x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - all_x.iter().copied().fold(f64::INFINITY, f64::min);
            let summary = |x: &[f64], y: &[f64]| -> Vec<f64> {
                let asym = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mid, _) = x
                    .iter()
                    .zip(y)
                    .map(|(xv, yv)| (*xv, (yv - asym / 2.0).abs()))
                    .fold((x[0], f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
                let mut v = vec![asym, mid];
                if p == 3 {
                    v.push((x_range / 5.0).max(1e-8));
                }
                v
            };
            let beta = summary(&all_x, &all_y);
            let per = data.individuals.iter().map(|ind| summary(&ind.x, &ind.y)).collect();
            (beta, per)
        }
        MeanFunction::Nonlinear(NonlinearMean::Custom(_)) => {
            return Err(Error::invalid("a custom mean function needs an explicit initial value"));
        }
        _ => {
            let poly;
            let design_model = if model.is_linear() {
                model
            } else {
                poly = ModelSpec::linear(p, model.structure.clone())?;
                &poly
            };
            let prepared = design_model.prepare(data)?;
            let rows = data.total_observations();
            let mut x = DMatrix::zeros(rows, p);
            let mut y = DVector::zeros(rows);
            let mut r = 0;
            let mut per = Vec::new();
            for i in 0..prepared.n() {
                let d = prepared.design(i).expect("linear design");
                let yi = DVector::from_column_slice(prepared.observations(i));
                for row in 0..d.nrows() {
                    x.set_row(r, &d.row(row));
                    y[r] = yi[row];
                    r += 1;
                }
                if let Some(b) = least_squares(d, &yi) {
                    per.push(b.iter().copied().collect());
                }
            }
            let beta = least_squares(&x, &y).map(|b| b.iter().copied().collect()).unwrap_or_else(|| {
                let mut b = vec![0.0; p];
                b[0] = y.mean();
                b
            });
            (beta, per)
        }
    };

    let tested = |k: usize| h.is_some_and(|h| h.is_tested(k));
    let mut theta = Theta::new(DVector::from_vec(beta), DMatrix::zeros(p, p), 1.0)?;
    if degenerate {
        for k in (0..p).filter(|&k| !tested(k)) {
            theta.gamma[(k, k)] = 1.0;
        }
        return Ok(InitReport { theta, degenerate: true });
    }
    let prepared = model.prepare(data)?;
    let mut rss = 0.0;
    let beta: Vec<f64> = theta.beta.iter().copied().collect();
    for i in 0..prepared.n() {
        let y = prepared.observations(i);
        let mut mean = vec![0.0; y.len()];
        prepared.mean_into(i, &beta, &mut mean, None);
        rss += y.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let sigma2 = rss / data.total_observations() as f64;
    theta.sigma2 = if sigma2.is_finite() && sigma2 > 0.0 { sigma2 } else { 1e-6 * y_scale * y_scale };
    for k in (0..p).filter(|&k| !tested(k)) {
        let col: Vec<f64> = per_ind.iter().map(|v| v[k]).collect();
        let var = 0.5 * sample_variance(&col);
        let floor = 1e-3 * (theta.beta[k] * theta.beta[k] + theta.sigma2);
        theta.gamma[(k, k)] = if var.is_finite() { var.max(floor) } else { floor };
    }
    Ok(InitReport { theta, degenerate: false })
}

/// Fits with default options.
pub fn fit(
    model: &ModelSpec,
    data: &Dataset,
    h: Option<&HypothesisSpec>,
    mc: Option<&McConfig>,
    init: Option<&Theta>,
) -> Result<FitResult> {
    fit_with(model, data, h, mc, init, &FitOptions::default())
}

/// Maximizes the (exact or fixed-draw Monte-Carlo) log-likelihood, under the
/// null when `h` is given.
pub fn fit_with(
    model: &ModelSpec,
    data: &Dataset,
    h: Option<&HypothesisSpec>,
    mc: Option<&McConfig>,
    init: Option<&Theta>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let objective = Objective::new(model.prepare(data)?, mc)?;
    fit_objective(&objective, model, data, h, init, opts)
}

fn constrain(theta: &Theta, s: &CovStructure, h: Option<&HypothesisSpec>) -> Theta {
    let mut t = theta.clone();
    let p = t.p();
    for i in 0..p {
        for j in 0..p {
            if !s.allows(p, i, j) || h.is_some_and(|h| h.is_tested(i) || h.is_tested(j)) {
                t.gamma[(i, j)] = 0.0;
            }
        }
    }
    t
}

pub(crate) fn fit_objective(
    objective: &Objective<'_>,
    model: &ModelSpec,
    data: &Dataset,
    h: Option<&HypothesisSpec>,
    init: Option<&Theta>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let p = model.p;
    let s = &model.structure;
    if let Some(h) = h {
        h.validate(p, s)?;
    }
    let start = match init {
        Some(t) => {
            if t.p() != p {
                return Err(Error::dim(format!("initial value has p = {}, model has p = {p}", t.p())));
            }
            t.clone()
        }
        None => default_init(model, data, h)?.theta,
    };
    let start = constrain(&start, s, h);
    let param = Param::new(p, s, h);
    let u0 = param.from_theta(&start, s);

    let nm_evals = opts.nm_evals.unwrap_or(if objective.is_exact() { 2000 } else { 0 });
    let mut best: Option<(Vec<f64>, f64, bool, usize, usize, Vec<f64>)> = None;
    let mut total_evals = 0;
    let mut restarts_used = 0;
    for attempt in 0..=opts.restarts {
        let u_start: Vec<f64> = if attempt == 0 {
            u0.clone()
        } else {
            let mut rng = substream(opts.seed, Domain::Restart, attempt as u64, 0);
            u0.iter()
                .enumerate()
                .map(|(k, v)| {
                    let f = 1.0 + opts.jitter * (2.0 * rng.random::<f64>() - 1.0);
                    if k == u0.len() - 1 {
                        v + f.ln()
                    } else {
                        v * f
                    }
                })
                .collect()
        };
        let run = minimize(objective, &param, &u_start, nm_evals, opts);
        total_evals += run.3;
        restarts_used = attempt;
        let better = best.as_ref().is_none_or(|b| run.1 < b.1);
        if better {
            best = Some(run);
        }
        if best.as_ref().is_some_and(|b| b.2) {
            break;
        }
    }
    let (u, fval, converged, _, n_iter, trace) = best.expect("at least one attempt");
    if !fval.is_finite() {
        return Err(Error::numeric("objective is not finite at the initial value or any restart"));
    }
    let theta_hat = constrain(&param.to_theta(&u), s, h);
    let (loglik, _) = objective.eval(&theta_hat, false)?;
    Ok(FitResult {
        loglik_se: objective.se(&theta_hat)?,
        theta_hat,
        loglik,
        converged,
        n_iter,
        n_evals: total_evals,
        restarts_used,
        null_tested: h.map(|h| h.tested.clone()),
        trace: opts.keep_trace.then_some(trace),
    })
}

/// Runs the two-stage minimization of `-ℓ/N` from `u_start`.
fn minimize(
    objective: &Objective<'_>,
    param: &Param,
    u_start: &[f64],
    nm_evals: usize,
    opts: &FitOptions,
) -> (Vec<f64>, f64, bool, usize, usize, Vec<f64>) {
    let n = objective.n() as f64;
    let scale: Vec<f64> = u_start
        .iter()
        .enumerate()
        .map(|(k, v)| if k == u_start.len() - 1 { 1.0 } else { v.abs().max(1.0) })
        .collect();
    let to_u = |v: &[f64]| -> Vec<f64> { v.iter().zip(&scale).map(|(a, b)| a * b).collect() };
    let v0: Vec<f64> = u_start.iter().zip(&scale).map(|(a, b)| a / b).collect();
    let value = |v: &[f64]| -> f64 {
        let theta = param.to_theta(&to_u(v));
        objective.eval(&theta, false).map(|r| -r.0 / n).unwrap_or(f64::INFINITY)
    };
    let mut trace = Vec::new();
    let mut evals = 0;
    let mut iters = 0;
    let mut v = v0;
    if nm_evals > 0 {
        let step: Vec<f64> = v.iter().map(|x| if x.abs() > 1e-8 { 0.1 * x.abs() } else { 0.1 }).collect();
        let rule = StopRule { max_evals: nm_evals, rel_tol: opts.rel_tol, stall_iters: opts.stall_iters };
        let r = nelder_mead(value, &v, &step, rule);
        evals += r.n_evals;
        iters += r.n_iter;
        trace.extend(r.trace);
        v = r.x;
    }
    let rule = StopRule {
        max_evals: opts.max_evals.saturating_sub(evals).max(1),
        rel_tol: opts.rel_tol,
        stall_iters: opts.stall_iters,
    };
    let r = bfgs(
        |v| {
            let u = to_u(v);
            let theta = param.to_theta(&u);
            let (f, g) = objective.eval(&theta, true).ok()?;
            let gu = param.grad_u(&u, &g.expect("gradient requested"), theta.sigma2);
            let gv: Vec<f64> = gu.iter().zip(&scale).map(|(a, b)| -a * b / n).collect();
            Some((-f / n, gv))
        },
        &v,
        rule,
    );
    evals += r.n_evals;
    iters += r.n_iter;
    trace.extend(r.trace.iter().map(|f| -f * n));
    (to_u(&r.x), r.f, r.converged, evals, iters, trace)
}

/// Null and alternative fits sharing the objective (and hence the Monte-Carlo
/// draws). The alternative never ends below the null: if no start beats the
/// null fit, the null estimate is reported for both.
pub fn fit_pair(
    model: &ModelSpec,
    data: &Dataset,
    h: &HypothesisSpec,
    mc: Option<&McConfig>,
    opts: &FitOptions,
) -> Result<(FitResult, FitResult)> {
    let objective = Objective::new(model.prepare(data)?, mc)?;
    let fit0 = fit_objective(&objective, model, data, Some(h), None, opts)?;
    let t0 = &fit0.theta_hat;
    let p = model.p;
    let untested: Vec<f64> = (0..p).filter(|k| !h.is_tested(*k)).map(|k| t0.gamma[(k, k)]).collect();
    let base = if untested.is_empty() {
        t0.sigma2
    } else {
        untested.iter().sum::<f64>() / untested.len() as f64
    };
    let mut start = t0.clone();
    for &k in &h.tested {
        start.gamma[(k, k)] = 0.05 * base.max(1e-3 * t0.sigma2);
    }
    let mut fit1 = fit_objective(&objective, model, data, None, Some(&start), opts)?;
    if objective.is_exact() || !fit1.converged || fit1.loglik < fit0.loglik - EPS_OPT {
        if let Ok(alt) = fit_objective(&objective, model, data, None, None, opts) {
            if alt.loglik > fit1.loglik {
                fit1 = FitResult { n_evals: fit1.n_evals + alt.n_evals, ..alt };
            }
        }
    }
    if fit1.loglik < fit0.loglik - EPS_OPT {
        let jittered = FitOptions { seed: opts.seed.wrapping_add(1), ..opts.clone() };
        for attempt in 1..=opts.restarts {
            let mut rng = substream(jittered.seed, Domain::Restart, 100 + attempt as u64, 0);
            let mut t = start.clone();
            for &k in &h.tested {
                t.gamma[(k, k)] *= 1.0 + opts.jitter * (2.0 * rng.random::<f64>() - 1.0);
            }
            if let Ok(alt) = fit_objective(&objective, model, data, None, Some(&t), &jittered) {
                if alt.loglik > fit1.loglik {
                    fit1 = alt;
                }
            }
            if fit1.loglik >= fit0.loglik - EPS_OPT {
                break;
            }
        }
    }
    if fit1.loglik < fit0.loglik {
        fit1 = FitResult { null_tested: None, ..fit0.clone() };
    }
    Ok((fit0, fit1))
}
