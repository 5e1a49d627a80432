//! Simulation experiments: data generation under the linear growth model
//! (`M1`) and the logistic growth model (`M2`), empirical levels, levels under
//! a misspecified mixture, and empirical power.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chibarsq::ChiBarSq;
use crate::error::{Error, Result};
use crate::estimation::{fit_pair, FitOptions};
use crate::likelihood::{lrt_statistic_mc, McConfig};
use crate::linalg::matrix_sqrt_psd;
use crate::lrt::{FisherPolicy, LimitLaw, TestOptions};
use crate::model::{CovStructure, Dataset, HypothesisSpec, Individual, ModelSpec, Theta};
use crate::rng::{substream, Domain};

/// Largest share of replications whose fits may fail.
pub const MAX_DROP_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioModel {
    /// Polynomial random-coefficient model of degree `p − 1`.
    Linear { p: usize },
    /// Logistic growth; `p = 2` fixes the scale.
    Logistic { p: usize },
}

impl ScenarioModel {
    pub fn p(&self) -> usize {
        match self {
            ScenarioModel::Linear { p } | ScenarioModel::Logistic { p } => *p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub label: String,
    pub model: ScenarioModel,
    /// Structure used when fitting.
    pub structure: CovStructure,
    /// Parameter generating the data.
    pub theta_star: Theta,
    /// Common observation times.
    pub x: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub h: HypothesisSpec,
    pub alphas: Vec<f64>,
    pub seed: u64,
    /// Monte-Carlo settings for nonlinear models.
    pub mc: Option<McConfig>,
    pub fit: FitOptions,
}

pub const DEFAULT_ALPHAS: [f64; 3] = [0.01, 0.05, 0.10];
/// Observation times of `M1`.
pub const M1_J: usize = 10;
/// Draws per individual for `M2` fits.
pub const M2_MC_SAMPLES: usize = 256;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

impl ScenarioSpec {
    /// Linear model `M1`: `β* = (0, 7, 2)`, standard deviations 1.3 and 1 with
    /// correlation 0.8 for the first two effects, `σ = 1.5`, `x = 1..10`.
    /// `tested` are zero-based effects with zero variance in `θ*`; `correlated`
    /// keeps the covariance of the first two effects.
    pub fn m1(p: usize, structure: CovStructure, tested: &[usize], correlated: bool) -> Result<ScenarioSpec> {
        if !(2..=3).contains(&p) {
            return Err(Error::invalid("the linear scenario has p = 2 or 3"));
        }
        let beta = DVector::from_column_slice(&[0.0, 7.0, 2.0][..p]);
        let mut gamma = DMatrix::zeros(p, p);
        gamma[(0, 0)] = 1.3 * 1.3;
        gamma[(1, 1)] = 1.0;
        if correlated {
            gamma[(0, 1)] = 1.04;
            gamma[(1, 0)] = 1.04;
        }
        for &k in tested {
            for j in 0..p {
                gamma[(k, j)] = 0.0;
                gamma[(j, k)] = 0.0;
            }
        }
        Ok(ScenarioSpec {
            label: format!("M1 p={p} {structure}"),
            model: ScenarioModel::Linear { p },
            structure,
            theta_star: Theta::new(beta, gamma, 1.5 * 1.5)?,
            x: (1..=M1_J).map(|j| j as f64).collect(),
            n: 500,
            k: 1000,
            h: HypothesisSpec::new(tested.to_vec()),
            alphas: DEFAULT_ALPHAS.to_vec(),
            seed: 1,
            mc: None,
            fit: FitOptions::default(),
        })
    }

    /// Logistic model `M2`: `β* = (200, 500, 150)`, standard deviations 50 and
    /// 15 for the inflection point and scale (covariance 375 when correlated),
    /// `σ = 10`, asymptote variance `asymptote_sd²` (tested, zero under the null).
    /// With `p = 2` the scale is fixed at 150.
    pub fn m2(p: usize, structure: CovStructure, correlated: bool, asymptote_sd: f64) -> Result<ScenarioSpec> {
        if !(2..=3).contains(&p) {
            return Err(Error::invalid("the logistic scenario has p = 2 or 3"));
        }
        let beta = DVector::from_column_slice(&[200.0, 500.0, 150.0][..p]);
        let mut gamma = diag(&[asymptote_sd * asymptote_sd, 2500.0, 225.0][..p]);
        if correlated && p == 3 {
            gamma[(1, 2)] = 375.0;
            gamma[(2, 1)] = 375.0;
        }
        let mut x: Vec<f64> = (1..=20).map(|j| 50.0 * j as f64).collect();
        x.extend((1..=5).map(|j| 1000.0 + 100.0 * j as f64));
        Ok(ScenarioSpec {
            label: format!("M2 p={p} {structure}"),
            model: ScenarioModel::Logistic { p },
            structure,
            theta_star: Theta::new(beta, gamma, 100.0)?,
            x,
            n: 500,
            k: 200,
            h: HypothesisSpec::new(vec![0]),
            alphas: DEFAULT_ALPHAS.to_vec(),
            seed: 1,
            mc: Some(McConfig::new(M2_MC_SAMPLES, 1)),
            fit: FitOptions::default(),
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match self.model {
            ScenarioModel::Linear { p } => ModelSpec::linear(p, self.structure.clone()),
            ScenarioModel::Logistic { p } => ModelSpec::logistic(p, self.structure.clone()),
        }
    }

    /// `θ*` with the tested rows and columns of `Γ` zeroed.
    pub fn null_theta(&self) -> Theta {
        let mut t = self.theta_star.clone();
        let p = t.p();
        for &k in &self.h.tested {
            for j in 0..p {
                t.gamma[(k, j)] = 0.0;
                t.gamma[(j, k)] = 0.0;
            }
        }
        t
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::invalid("N and K must be positive"));
        }
        if self.x.is_empty() {
            return Err(Error::invalid("scenario needs observation times"));
        }
        if self.theta_star.p() != self.model.p() {
            return Err(Error::dim("theta* does not match the scenario model"));
        }
        self.h.validate(self.model.p(), &self.structure)?;
        if !matches!(self.model, ScenarioModel::Linear { .. }) && self.mc.is_none() {
            return Err(Error::invalid("nonlinear scenarios need a Monte-Carlo configuration"));
        }
        Ok(())
    }
}

/// Dataset number `k` of the scenario. Individual `i` draws from its own
/// stream keyed by `(seed, k, i)`, so datasets do not depend on scheduling.
pub fn generate(spec: &ScenarioSpec, k: usize) -> Result<Dataset> {
    spec.validate()?;
    let p = spec.model.p();
    let model = spec.model_spec()?;
    let template = Dataset::new(vec![Individual::new("template", spec.x.clone(), vec![0.0; spec.x.len()])?])?;
    let prepared = model.prepare(&template)?;
    let root = matrix_sqrt_psd(&spec.theta_star.gamma)?;
    let sigma = spec.theta_star.sigma2.sqrt();
    let j = spec.x.len();
    let mut mean = vec![0.0; j];
    let individuals = (0..spec.n)
        .map(|i| {
            let mut rng = substream(spec.seed, Domain::Generate, k as u64, i as u64);
            let e = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let phi = &spec.theta_star.beta + &root * e;
            prepared.mean_into(0, phi.as_slice(), &mut mean, None);
            let y = mean
                .iter()
                .map(|m| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    m + sigma * eps
                })
                .collect();
            Individual::new(format!("{}", i + 1), spec.x.clone(), y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(individuals)
}

/// LRT statistics over the replications of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtSample {
    /// `(replication, LRT)` for replications whose fits succeeded.
    pub lrts: Vec<(usize, f64)>,
    pub dropped: usize,
    pub requested: usize,
}

impl LrtSample {
    pub fn k_effective(&self) -> usize {
        self.lrts.len()
    }

    /// `(α̂, binomial se)` for rejections `LRT > threshold`.
    pub fn rejection_rate(&self, threshold: f64) -> (f64, f64) {
        let k = self.lrts.len() as f64;
        let hits = self.lrts.iter().filter(|(_, t)| *t > threshold).count() as f64;
        let a = hits / k;
        (a, (a * (1.0 - a) / k).sqrt())
    }
}

fn replication_lrt(spec: &ScenarioSpec, model: &ModelSpec, k: usize) -> Result<f64> {
    let data = generate(spec, k)?;
    let mc = spec.mc.as_ref().map(|m| McConfig { seed: m.seed.wrapping_add(k as u64), ..m.clone() });
    let fit = FitOptions { seed: spec.fit.seed.wrapping_add(k as u64), ..spec.fit.clone() };
    let (f0, f1) = fit_pair(model, &data, &spec.h, mc.as_ref(), &fit)?;
    let lrt = match &mc {
        None => 2.0 * (f1.loglik - f0.loglik),
        Some(mc) => lrt_statistic_mc(&f0.theta_hat, &f1.theta_hat, model, &data, mc)?.0,
    };
    if !lrt.is_finite() {
        return Err(Error::numeric("non-finite LRT"));
    }
    Ok(lrt.max(0.0))
}

/// Generates and fits the `K` replications in parallel. Failed replications
/// are dropped and counted; more than [`MAX_DROP_FRACTION`] fails the run.
pub fn run_replications(spec: &ScenarioSpec) -> Result<LrtSample> {
    run_replications_with(spec, |_, _| {})
}

/// As [`run_replications`], calling `progress(done, total)` as replications finish.
pub fn run_replications_with(spec: &ScenarioSpec, progress: impl Fn(usize, usize) + Sync) -> Result<LrtSample> {
    spec.validate()?;
    let model = spec.model_spec()?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(usize, Result<f64>)> = (0..spec.k)
        .into_par_iter()
        .map(|k| {
            let r = replication_lrt(spec, &model, k);
            let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(d, spec.k);
            (k, r)
        })
        .collect();
    let mut lrts = Vec::with_capacity(spec.k);
    let mut dropped = 0;
    let mut first_error = None;
    for (k, r) in results {
        match r {
            Ok(v) => lrts.push((k, v)),
            Err(e) => {
                dropped += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if dropped as f64 > MAX_DROP_FRACTION * spec.k as f64 {
        return Err(Error::Convergence(format!(
            "{dropped} of {} replications failed (cap {:.0}%); first error: {}",
            spec.k,
            100.0 * MAX_DROP_FRACTION,
            first_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    Ok(LrtSample { lrts, dropped, requested: spec.k })
}

/// Limiting law of the scenario's test with the information at the null
/// projection of `θ*` (computed on dataset 0 only when the weights need it).
pub fn null_law(spec: &ScenarioSpec) -> Result<LimitLaw> {
    let model = spec.model_spec()?;
    let opts = TestOptions { fisher: FisherPolicy::WhenNeeded, seed: spec.seed, ..TestOptions::default() };
    let theta = spec.null_theta();
    let cone_only = Dataset::new(vec![Individual::new("x", spec.x.clone(), vec![0.0; spec.x.len()])?])?;
    // Information is averaged per individual and all individuals share x,
    // so one design row set suffices for linear models.
    let data = if model.is_linear() { cone_only } else { generate(&ScenarioSpec { k: 1, ..spec.clone() }, 0)? };
    LimitLaw::at_theta(&model, &data, &spec.h, &theta, spec.mc.as_ref(), &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub alpha: f64,
    pub n: usize,
    pub structure: String,
    pub alpha_hat: f64,
    pub se: f64,
    pub k_effective: usize,
    pub threshold: f64,
    /// Which limiting law supplied the threshold.
    pub law: String,
}

/// Rejection rates of `sample` against `threshold(α)` for each `α` of the spec.
pub fn score(
    spec: &ScenarioSpec,
    sample: &LrtSample,
    law: &str,
    threshold: impl Fn(f64) -> Result<f64>,
) -> Result<Vec<LevelRow>> {
    spec.alphas
        .iter()
        .map(|&alpha| {
            let c = threshold(alpha)?;
            let (alpha_hat, se) = sample.rejection_rate(c);
            Ok(LevelRow {
                alpha,
                n: spec.n,
                structure: spec.structure.label(),
                alpha_hat,
                se,
                k_effective: sample.k_effective(),
                threshold: c,
                law: law.to_string(),
            })
        })
        .collect()
}

/// Empirical levels `α̂_K = (1/K) Σ 1{LRT_k > c_α}` with `c_α` from the
/// correct limiting law.
pub fn empirical_level(spec: &ScenarioSpec) -> Result<(Vec<LevelRow>, LrtSample)> {
    let law = null_law(spec)?;
    let sample = run_replications(spec)?;
    let rows = score(spec, &sample, &mixture_label(&law.weights), |a| law.quantile(a))?;
    Ok((rows, sample))
}

/// The same replications scored against a given (possibly wrong) mixture.
pub fn misspecified_level(spec: &ScenarioSpec, wrong: &ChiBarSq) -> Result<(Vec<LevelRow>, LrtSample)> {
    let sample = run_replications(spec)?;
    let rows = score(spec, &sample, &mixture_label(wrong), |a| wrong.quantile(a))?;
    Ok((rows, sample))
}

/// Rejection rate at level `alpha` for data generated at `θ*` (typically
/// outside the null), with thresholds from the null limiting law.
pub fn empirical_power(spec: &ScenarioSpec, alpha: f64) -> Result<LevelRow> {
    let law = null_law(spec)?;
    let sample = run_replications(spec)?;
    let spec_alpha = ScenarioSpec { alphas: vec![alpha], ..spec.clone() };
    let mut rows = score(&spec_alpha, &sample, &mixture_label(&law.weights), |a| law.quantile(a))?;
    Ok(rows.remove(0))
}

/// Human-readable mixture such as `0.5chi2_0+0.5chi2_1`.
pub fn mixture_label(d: &ChiBarSq) -> String {
    d.weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| format!("{}chi2_{i}", trim_float(*w)))
        .collect::<Vec<_>>()
        .join("+")
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// CSV with columns `alpha,N,structure,alpha_hat,se,K_effective` followed by
/// the threshold and the law used.
pub fn rows_to_csv(rows: &[LevelRow]) -> String {
    let mut out = String::from("alpha,N,structure,alpha_hat,se,K_effective,threshold,law\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{},{:.6},{}",
            r.alpha, r.n, r.structure, r.alpha_hat, r.se, r.k_effective, r.threshold, r.law
        );
    }
    out
}

/// Published reference level for a column of a table, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub alpha: f64,
    pub value: f64,
}

/// What a scenario column measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Measure {
    /// Levels against the correct limiting law.
    Level,
    /// Levels against the given mixture weights.
    Misspecified(Vec<f64>),
    /// Rejection rate at the first alpha.
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub spec: ScenarioSpec,
    pub measure: Measure,
    pub references: Vec<Reference>,
}

fn refs(values: [f64; 3]) -> Vec<Reference> {
    DEFAULT_ALPHAS.iter().zip(values).map(|(&alpha, value)| Reference { alpha, value }).collect()
}

/// Built-in experiment layouts: `table1` … `table5` and `power`.
pub fn scenario(name: &str) -> Result<Vec<Column>> {
    use CovStructure::{Diagonal, Full};
    let level = |spec, values| Column { spec, measure: Measure::Level, references: refs(values) };
    Ok(match name {
        "table1" => vec![
            level(ScenarioSpec::m1(2, Diagonal, &[1], false)?, [0.008, 0.044, 0.089]),
            level(ScenarioSpec::m1(2, Full, &[1], true)?, [0.009, 0.045, 0.092]),
        ],
        "table2" => vec![
            level(ScenarioSpec::m1(3, Diagonal, &[2], false)?, [0.009, 0.049, 0.097]),
            level(ScenarioSpec::m1(3, Full, &[2], true)?, [0.008, 0.044, 0.093]),
        ],
        "table3" => {
            let spec = ScenarioSpec::m1(2, Full, &[1], true)?;
            vec![
                level(spec.clone(), [0.009, 0.045, 0.092]),
                Column { spec, measure: Measure::Misspecified(vec![0.5, 0.5]), references: refs([0.050, 0.174, 0.311]) },
            ]
        }
        "table4" => {
            let mut spec = ScenarioSpec::m1(3, Diagonal, &[1, 2], false)?;
            spec.n = 800;
            vec![level(spec, [0.010, 0.048, 0.096])]
        }
        "table5" => vec![
            level(ScenarioSpec::m2(2, Diagonal, false, 0.0)?, [0.003, 0.038, 0.082]),
            level(ScenarioSpec::m2(2, Full, false, 0.0)?, [0.007, 0.033, 0.073]),
            level(ScenarioSpec::m2(3, Diagonal, false, 0.0)?, [0.0, 0.040, 0.077]),
            level(ScenarioSpec::m2(3, Full, true, 0.0)?, [0.003, 0.033, 0.073]),
        ],
        "power" => [(2.0, 0.23), (5.0, 0.57), (7.0, 0.98)]
            .into_iter()
            .map(|(sd, value)| {
                let mut spec = ScenarioSpec::m2(2, Diagonal, false, sd)?;
                spec.label = format!("{} gamma1={sd}", spec.label);
                spec.alphas = vec![0.05];
                Ok(Column { spec, measure: Measure::Power, references: vec![Reference { alpha: 0.05, value }] })
            })
            .collect::<Result<Vec<_>>>()?,
        other => {
            return Err(Error::invalid(format!(
                "unknown scenario '{other}' (expected table1..table5 or power)"
            )))
        }
    })
}

/// Runs one column and returns its rows.
pub fn run_column(col: &Column) -> Result<(Vec<LevelRow>, LrtSample)> {
    run_column_with(col, |_, _| {})
}

pub fn run_column_with(col: &Column, progress: impl Fn(usize, usize) + Sync) -> Result<(Vec<LevelRow>, LrtSample)> {
    let spec = &col.spec;
    let sample = run_replications_with(spec, progress)?;
    let rows = match &col.measure {
        Measure::Level | Measure::Power => {
            let law = null_law(spec)?;
            score(spec, &sample, &mixture_label(&law.weights), |a| law.quantile(a))?
        }
        Measure::Misspecified(w) => {
            let wrong = ChiBarSq::from_weights(w)?;
            score(spec, &sample, &mixture_label(&wrong), |a| wrong.quantile(a))?
        }
    };
    Ok((rows, sample))
}
