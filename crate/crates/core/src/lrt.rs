//! End-to-end likelihood ratio test of zero variance components.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chibarsq::{build_cone, weights_closed_form, weights_mc, ChiBarSq, Cone, ConeFactor, TailSample, WeightSource};
use crate::error::{Error, Result};
use crate::estimation::{fit_pair, FitOptions, FitResult, EPS_OPT};
use crate::fisher::{correlation, fim_linear, fim_numerical, FimMethod, FisherInfo};
use crate::likelihood::{lrt_statistic_mc, McConfig};
use crate::model::{Dataset, EffectPermutation, HypothesisSpec, ModelSpec, Theta};

/// How the limiting mixture is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    /// Exact weights when available, tail simulation for non-polyhedral cones,
    /// Monte-Carlo weights otherwise.
    #[default]
    Auto,
    ClosedForm,
    MonteCarlo,
    /// Weights by Monte-Carlo, p-value and quantile from simulated statistics.
    Tail,
}

/// Where the Fisher information is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimPoint {
    #[default]
    Null,
    Alternative,
}

/// Whether the information is computed when the weights do not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherPolicy {
    #[default]
    Always,
    WhenNeeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvalueMethod {
    /// From the weighted chi-square mixture.
    Mixture,
    /// Direct simulation of the limiting statistic.
    TailMc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestOptions {
    pub alpha: f64,
    pub weights: WeightMethod,
    pub fim_point: FimPoint,
    pub fim_method: FimMethod,
    pub fisher: FisherPolicy,
    pub weight_samples: usize,
    pub tail_samples: usize,
    /// Seed of the weight and tail simulations.
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            alpha: 0.05,
            weights: WeightMethod::Auto,
            fim_point: FimPoint::Null,
            fim_method: FimMethod::NumericalHessian,
            fisher: FisherPolicy::Always,
            weight_samples: 100_000,
            tail_samples: 200_000,
            seed: 1,
            fit: FitOptions::default(),
        }
    }
}

/// Limiting chi-bar-square law of the LRT for one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitLaw {
    /// Cone in the tested-last layout.
    pub cone: Cone,
    pub weights: ChiBarSq,
    pub pvalue_method: PvalueMethod,
    /// Correlation of the limiting Gaussian on the non-zero cone coordinates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    tail: Option<TailSample>,
}

/// `Free(k) × Psd(1)` (or a single half-line) has weights ½, ½ at `k`, `k+1`
/// whatever the metric: the free part is always matched exactly and the
/// remaining one-dimensional residual is positive half the time.
fn half_half(reduced: &Cone) -> Option<usize> {
    let mut free = 0;
    let mut half_lines = 0;
    for f in &reduced.factors {
        match f {
            ConeFactor::Free { indices } => free += indices.len(),
            ConeFactor::Orthant { indices } if indices.len() == 1 => half_lines += 1,
            ConeFactor::Psd { order: 1, .. } => half_lines += 1,
            _ => return None,
        }
    }
    (half_lines == 1).then_some(free)
}

fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl LimitLaw {
    /// Whether the weights for `cone` need the Fisher information.
    pub fn needs_fisher(cone: &Cone, method: WeightMethod) -> bool {
        method != WeightMethod::Auto || half_half(&cone.reduced().0).is_none()
    }

    /// Builds the law on `cone` (tested-last layout). `fisher` must be given
    /// whenever [`LimitLaw::needs_fisher`] says so.
    pub fn new(cone: Cone, fisher: Option<&FisherInfo>, opts: &TestOptions) -> Result<LimitLaw> {
        let (reduced, kept) = cone.reduced();
        let v = match fisher {
            Some(info) => {
                if info.q() != cone.total_dim {
                    return Err(Error::dim(format!(
                        "information is {}x{}, cone dimension {}",
                        info.q(),
                        info.q(),
                        cone.total_dim
                    )));
                }
                Some(sub_matrix(&info.inverse()?, &kept))
            }
            None => None,
        };
        let corr = v.as_ref().map(correlation).transpose()?;
        let exact_half = half_half(&reduced);
        let orthant_dim = match reduced.factors.as_slice() {
            [ConeFactor::Orthant { indices }] => Some(indices.len()),
            _ => None,
        };
        let need_v = || {
            v.as_ref().ok_or_else(|| Error::invalid("the limiting law for this cone needs the Fisher information"))
        };
        let mc_weights = |v: &DMatrix<f64>| weights_mc(&reduced, v, opts.weight_samples, opts.seed);
        let (weights, pvalue_method, tail) = match opts.weights {
            WeightMethod::Auto | WeightMethod::ClosedForm => {
                if let Some(k) = exact_half {
                    let mut w = vec![0.0; k + 2];
                    w[k] = 0.5;
                    w[k + 1] = 0.5;
                    (ChiBarSq::new(w, WeightSource::ClosedForm)?, PvalueMethod::Mixture, None)
                } else if let Some(r) = orthant_dim.filter(|&r| r <= 3) {
                    let c = corr.as_ref().ok_or_else(|| {
                        Error::invalid("closed-form weights need the Fisher information")
                    })?;
                    debug_assert_eq!(c.nrows(), r);
                    (weights_closed_form(c)?, PvalueMethod::Mixture, None)
                } else if opts.weights == WeightMethod::ClosedForm {
                    return Err(Error::invalid(format!(
                        "no closed-form weights for the cone {reduced}; use Monte-Carlo or tail weights"
                    )));
                } else if orthant_dim.is_some() {
                    (mc_weights(need_v()?)?, PvalueMethod::Mixture, None)
                } else {
                    let v = need_v()?;
                    let tail = TailSample::simulate(&reduced, v, opts.tail_samples, opts.seed)?;
                    (mc_weights(v)?, PvalueMethod::TailMc, Some(tail))
                }
            }
            WeightMethod::MonteCarlo => (mc_weights(need_v()?)?, PvalueMethod::Mixture, None),
            WeightMethod::Tail => {
                let v = need_v()?;
                let tail = TailSample::simulate(&reduced, v, opts.tail_samples, opts.seed)?;
                (mc_weights(v)?, PvalueMethod::TailMc, Some(tail))
            }
        };
        Ok(LimitLaw { cone, weights, pvalue_method, correlation: corr.as_ref().map(rows), tail })
    }

    /// Law for testing `h` in `model`, with the information evaluated at
    /// `theta` (original effect order) on `data` only when required.
    pub fn at_theta(
        model: &ModelSpec,
        data: &Dataset,
        h: &HypothesisSpec,
        theta: &Theta,
        mc: Option<&McConfig>,
        opts: &TestOptions,
    ) -> Result<LimitLaw> {
        let (pm, hp, perm) = permute(model, h)?;
        let cone = build_cone(pm.p, hp.r(), &pm.structure)?;
        let fisher = if opts.fisher == FisherPolicy::Always || LimitLaw::needs_fisher(&cone, opts.weights) {
            Some(information(&pm, data, &perm.apply_theta(theta), mc, opts.fim_method)?)
        } else {
            None
        };
        LimitLaw::new(cone, fisher.as_ref(), opts)
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        match &self.tail {
            Some(t) => t.quantile(alpha),
            None => self.weights.quantile(alpha),
        }
    }

    pub fn pvalue(&self, t: f64) -> f64 {
        match &self.tail {
            Some(tail) => tail.pvalue(t),
            None => self.weights.pvalue(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub lrt: f64,
    pub lrt_se: f64,
    pub weights: ChiBarSq,
    pub quantile_at_alpha: f64,
    pub pvalue: f64,
    pub pvalue_method: PvalueMethod,
    pub reject: bool,
    pub alpha: f64,
    /// Null fit, then alternative fit, in the original effect order.
    pub fits: (FitResult, FitResult),
    /// Information in the tested-last layout (see `permutation`).
    pub fisher: Option<FisherInfo>,
    pub cone: Cone,
    /// Correlation of the limiting Gaussian on the non-zero cone coordinates.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Position `k` of the tested-last layout holds original effect `order[k]`.
    pub permutation: EffectPermutation,
    /// One-based tested effects in the original order.
    pub tested: Vec<usize>,
    pub structure: String,
    pub model: String,
    pub warnings: Vec<String>,
    pub version: String,
}

fn permute(model: &ModelSpec, h: &HypothesisSpec) -> Result<(ModelSpec, HypothesisSpec, EffectPermutation)> {
    h.validate(model.p, &model.structure)?;
    let perm = EffectPermutation::tested_last(model.p, h);
    let pm = model.permuted(&perm)?;
    let hp = perm.apply_hypothesis(h);
    Ok((pm, hp, perm))
}

fn information(
    model: &ModelSpec,
    data: &Dataset,
    theta: &Theta,
    mc: Option<&McConfig>,
    method: FimMethod,
) -> Result<FisherInfo> {
    if model.is_linear() {
        fim_linear(theta, model, data)
    } else {
        let mc = mc.ok_or_else(|| Error::invalid("nonlinear models need a Monte-Carlo configuration"))?;
        fim_numerical(theta, model, data, mc, method)
    }
}

fn unpermute_fit(fit: FitResult, perm: &EffectPermutation) -> FitResult {
    let inv = perm.inverse();
    FitResult {
        theta_hat: inv.apply_theta(&fit.theta_hat),
        null_tested: fit.null_tested.map(|t| {
            let mut v: Vec<usize> = t.iter().map(|&k| perm.order[k]).collect();
            v.sort_unstable();
            v
        }),
        ..fit
    }
}

/// Relative size below which an untested variance counts as zero.
const NEAR_ZERO_VARIANCE: f64 = 1e-6;

fn run(
    model: &ModelSpec,
    data: &Dataset,
    h: &HypothesisSpec,
    mc: Option<&McConfig>,
    opts: &TestOptions,
    theta_star: Option<&Theta>,
) -> Result<TestReport> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {} must lie in (0, 1)", opts.alpha)));
    }
    let (pm, hp, perm) = permute(model, h)?;
    let mut warnings = Vec::new();
    let star = match theta_star {
        Some(t) => {
            t.validate(&model.structure)?;
            if t.p() != model.p {
                return Err(Error::dim(format!("theta has p = {}, model p = {}", t.p(), model.p)));
            }
            let tp = perm.apply_theta(t);
            let p = pm.p;
            let off_null = (0..p)
                .flat_map(|i| (0..p).map(move |j| (i, j)))
                .any(|(i, j)| (hp.is_tested(i) || hp.is_tested(j)) && tp.gamma[(i, j)] != 0.0);
            if off_null {
                return Err(Error::invalid("theta must lie in the null: tested variances and covariances are zero"));
            }
            Some(tp)
        }
        None => None,
    };

    let (fit0, fit1) = fit_pair(&pm, data, &hp, mc, &opts.fit)?;
    if !fit0.converged {
        warnings.push("null fit did not converge".into());
    }
    if !fit1.converged {
        warnings.push("alternative fit did not converge".into());
    }
    let (mut lrt, lrt_se) = if pm.is_linear() {
        (2.0 * (fit1.loglik - fit0.loglik), 0.0)
    } else {
        let mc = mc.ok_or_else(|| Error::invalid("nonlinear models need a Monte-Carlo configuration"))?;
        lrt_statistic_mc(&fit0.theta_hat, &fit1.theta_hat, &pm, data, mc)?
    };
    if lrt < 0.0 {
        if lrt < -EPS_OPT.max(3.0 * lrt_se) {
            warnings.push(format!("negative LRT estimate {lrt:.3e} set to zero"));
        }
        lrt = 0.0;
    }

    let t0 = &fit0.theta_hat;
    let scale = (0..pm.p).map(|k| t0.gamma[(k, k)]).fold(t0.sigma2, f64::max);
    let flat = (0..pm.p).filter(|k| !hp.is_tested(*k) && t0.gamma[(*k, *k)] <= NEAR_ZERO_VARIANCE * scale);
    for k in flat {
        warnings.push(format!(
            "variance of untested effect {} is near zero under the null; the limiting law may not apply",
            perm.order[k] + 1
        ));
    }

    let cone = build_cone(pm.p, hp.r(), &pm.structure)?;
    let fisher = if opts.fisher == FisherPolicy::Always || LimitLaw::needs_fisher(&cone, opts.weights) {
        let at = match (&star, opts.fim_point) {
            (Some(t), _) => t.clone(),
            (None, FimPoint::Null) => fit0.theta_hat.clone(),
            (None, FimPoint::Alternative) => fit1.theta_hat.clone(),
        };
        let info = information(&pm, data, &at, mc, opts.fim_method)?;
        if info.clipped {
            warnings.push("Fisher information was not positive definite; small eigenvalues raised".into());
        }
        Some(info)
    } else {
        None
    };
    let law = LimitLaw::new(cone, fisher.as_ref(), opts)?;
    let quantile = law.quantile(opts.alpha)?;
    let pvalue = law.pvalue(lrt);
    Ok(TestReport {
        lrt,
        lrt_se,
        quantile_at_alpha: quantile,
        pvalue,
        pvalue_method: law.pvalue_method,
        reject: lrt >= quantile,
        alpha: opts.alpha,
        fits: (unpermute_fit(fit0, &perm), unpermute_fit(fit1, &perm)),
        fisher,
        cone: law.cone,
        correlation: law.correlation,
        weights: law.weights,
        permutation: perm,
        tested: h.tested.iter().map(|k| k + 1).collect(),
        structure: model.structure.label(),
        model: model.mean.label(),
        warnings,
        version: crate::VERSION.to_string(),
    })
}

/// Fits under the null and the alternative, computes the LRT and compares it
/// with its chi-bar-square limit, using the information at the null fit by
/// default.
pub fn run_test(
    model: &ModelSpec,
    data: &Dataset,
    h: &HypothesisSpec,
    mc: Option<&McConfig>,
    opts: &TestOptions,
) -> Result<TestReport> {
    run(model, data, h, mc, opts, None)
}

/// As [`run_test`], but with the limiting law built from the information at a
/// known null parameter `theta_star`.
pub fn evaluate_at_theta(
    theta_star: &Theta,
    model: &ModelSpec,
    data: &Dataset,
    h: &HypothesisSpec,
    mc: Option<&McConfig>,
    opts: &TestOptions,
) -> Result<TestReport> {
    run(model, data, h, mc, opts, Some(theta_star))
}
