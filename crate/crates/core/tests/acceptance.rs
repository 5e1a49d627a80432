//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always visible. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p varcomp-core --release --test acceptance -- 1 2 5`.
//! Criterion 9 runs a few hundred Monte-Carlo fits and takes about an hour
//! on one core in release mode.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};

use varcomp_core::chibarsq::chibar_sample_stats;
use varcomp_core::simlab::{self, null_law, run_replications, score, ScenarioSpec};
use varcomp_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn binom_se(p: f64, k: usize) -> f64 {
    (p * (1.0 - p) / k as f64).sqrt()
}

// ---------------------------------------------------------------- 1

fn c1_mixture_quantiles() -> Result<Outcome> {
    const TOL: f64 = 1e-3;
    let q = |w: &[f64]| ChiBarSq::from_weights(w)?.quantile(0.05);
    let p = |w: &[f64], t: f64| Ok::<_, Error>(ChiBarSq::from_weights(w)?.pvalue(t));
    let got = [
        (q(&[0.5, 0.5])?, 2.706),
        (q(&[0.0, 0.5, 0.5])?, 5.139),
        (q(&[0.139, 0.5, 0.361])?, 4.682),
        (p(&[0.5, 0.5], 3.651)?, 0.028),
        (p(&[0.0, 0.5, 0.5], 4.178)?, 0.082),
    ];
    let pass = got.iter().all(|(g, want)| (g - want).abs() <= TOL);
    let detail = got.iter().map(|(g, w)| format!("{g:.4}/{w}")).collect::<Vec<_>>().join(" ");
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 2

fn c2_closed_form_weights() -> Result<Outcome> {
    let corr = |r: usize, rho: f64| {
        let mut c = DMatrix::from_element(r, r, rho);
        c.fill_diagonal(1.0);
        c
    };
    let cases: Vec<(DMatrix<f64>, Vec<f64>, f64)> = vec![
        (corr(1, 0.0), vec![0.5, 0.5], 1e-12),
        (corr(2, 0.0), vec![0.25, 0.5, 0.25], 1e-12),
        (corr(3, 0.0), vec![0.125, 0.375, 0.375, 0.125], 1e-12),
        (corr(2, 0.644), vec![0.139, 0.5, 0.361], 1e-3),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (c, want, tol) in cases {
        let w = weights_closed_form(&c)?.weights;
        pass &= w.len() == want.len() && w.iter().zip(&want).all(|(a, b)| (a - b).abs() <= tol);
        detail.push(format!("{:?}", w.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()));
    }
    outcome(pass, detail.join(" "))
}

// ---------------------------------------------------------------- 3

fn c3_mc_weights_vs_closed_form() -> Result<Outcome> {
    const N: usize = 100_000;
    const SE_MULT: f64 = 3.0;
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for (i, rho) in [-0.8, 0.0, 0.8].into_iter().enumerate() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let exact = weights_closed_form(&v)?;
        let mc = weights_mc(&Cone::orthant(2), &v, N, 100 + i as u64)?;
        for (&w, &e) in mc.weights.iter().zip(&exact.weights) {
            let se = binom_se(e, N);
            worst = worst.max((w - e).abs() / se);
            pass &= (w - e).abs() <= SE_MULT * se;
        }
    }
    outcome(pass, format!("max |mc - exact| = {worst:.2} se (limit {SE_MULT})"))
}

// ---------------------------------------------------------------- 4

fn c4_cone_support() -> Result<Outcome> {
    const N: usize = 100_000;
    const SE_MULT: f64 = 3.0;
    let mut pass = true;
    let mut detail = Vec::new();
    let cases = [
        (3usize, 1usize, CovStructure::Full, vec![2usize, 3]),
        (3, 2, CovStructure::Diagonal, vec![0, 1, 2]),
    ];
    for (idx, (p, r, s, support)) in cases.into_iter().enumerate() {
        // Information of the linear scenario at a null point with the last
        // r effects zero and the others correlated.
        let mut gamma = DMatrix::zeros(p, p);
        gamma[(0, 0)] = 1.69;
        if r == 1 {
            gamma[(1, 1)] = 1.0;
            if s == CovStructure::Full {
                gamma[(0, 1)] = 1.04;
                gamma[(1, 0)] = 1.04;
            }
        }
        let theta = Theta::new(DVector::from_column_slice(&[0.0, 7.0, 2.0][..p]), gamma, 2.25)?;
        let model = ModelSpec::linear(p, s.clone())?;
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let data = Dataset::new(vec![Individual::new("t", x.clone(), vec![0.0; x.len()])?])?;
        let info = fim_linear(&theta, &model, &data)?;
        let cone = build_cone(p, r, &s)?;
        let v = info.inverse()?;
        let (reduced, kept) = cone.reduced();
        let vk = DMatrix::from_fn(kept.len(), kept.len(), |i, j| v[(kept[i], kept[j])]);
        let w = weights_mc(&reduced, &vk, N, 40 + idx as u64)?;
        let se = w.se().unwrap();
        let outside: f64 = (0..w.weights.len()).filter(|d| !support.contains(d)).map(|d| w.weights[d]).sum();
        let outside_se: f64 = (0..w.weights.len()).filter(|d| !support.contains(d)).map(|d| se[d]).sum();
        let inside_ok = support.iter().all(|&d| d < w.weights.len() && w.weights[d] > 0.0);
        // With zero observed mass the binomial se is zero, so the bound is one draw.
        let bound = (SE_MULT * outside_se).max(1.0 / N as f64);
        pass &= inside_ok && outside < bound;
        detail.push(format!("{s} p={p} r={r}: {:?}", w.weights.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()));
    }
    outcome(pass, detail.join("; "))
}

// ---------------------------------------------------------------- 5

/// Data whose residuals have mean zero and average outer product exactly
/// `Ω = ZΓZᵗ + σ²I`, so the observed information equals the expected one.
fn moment_matched_data(theta: &Theta, model: &ModelSpec, x: &[f64]) -> Result<Dataset> {
    let template = Dataset::new(vec![Individual::new("t", x.to_vec(), vec![0.0; x.len()])?])?;
    let prepared = model.prepare(&template)?;
    let z = prepared.design(0).expect("linear design").clone();
    let j = x.len();
    let omega = &z * &theta.gamma * z.transpose() + DMatrix::identity(j, j) * theta.sigma2;
    let root = matrix_sqrt_psd(&omega)? * (j as f64).sqrt();
    let mean = &z * &theta.beta;
    let mut individuals = Vec::with_capacity(2 * j);
    for k in 0..j {
        for sign in [1.0, -1.0] {
            let y: Vec<f64> = (0..j).map(|t| mean[t] + sign * root[(t, k)]).collect();
            individuals.push(Individual::new(format!("{k}{sign}"), x.to_vec(), y)?);
        }
    }
    Dataset::new(individuals)
}

/// Central second difference with one Richardson step.
fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let q = x.len();
    let second = |i: usize, j: usize, h: &[f64]| {
        let at = |si: f64, sj: f64| {
            let mut y = x.to_vec();
            y[i] += si * h[i];
            y[j] += sj * h[j];
            f(&y)
        };
        if i == j {
            let mut yp = x.to_vec();
            let mut ym = x.to_vec();
            yp[i] += 2.0 * h[i];
            ym[i] -= 2.0 * h[i];
            (f(&yp) - 2.0 * f(x) + f(&ym)) / (4.0 * h[i] * h[i])
        } else {
            (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[i] * h[j])
        }
    };
    let h1: Vec<f64> = x.iter().map(|v| 1e-3 * v.abs().max(0.1)).collect();
    let h2: Vec<f64> = h1.iter().map(|h| h / 2.0).collect();
    DMatrix::from_fn(q, q, |i, j| {
        let a = second(i, j, &h1);
        let b = second(i, j, &h2);
        (4.0 * b - a) / 3.0
    })
}

fn c5_fim_cross_validation() -> Result<Outcome> {
    const REL_TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    for (s, correlated) in [(CovStructure::Full, true), (CovStructure::Diagonal, false)] {
        let spec = ScenarioSpec::m1(2, s.clone(), &[], correlated)?;
        let model = spec.model_spec()?;
        let theta = spec.theta_star.clone();
        let data = moment_matched_data(&theta, &model, &spec.x)?;
        let info = fim_linear(&theta, &model, &data)?.matrix;
        let flat = theta.flatten(&s);
        let f = |v: &[f64]| {
            Theta::unflatten(v, &s, 2).and_then(|t| loglik_linear(&t, &model, &data)).unwrap_or(f64::NAN)
        };
        let h = fd_hessian(&f, &flat) * (-1.0 / data.n() as f64);
        // Entries that vanish analytically carry difference-stencil roundoff
        // of about 1e-10; relative error is taken against this floor there.
        let floor = 1e-6 * info.amax();
        for (a, b) in info.iter().zip(h.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(floor));
        }
    }
    outcome(worst < REL_TOL, format!("max relative error {worst:.2e} (limit {REL_TOL:.0e})"))
}

// ---------------------------------------------------------------- 6

fn c6_likelihood_oracle() -> Result<Outcome> {
    const SE_MULT: f64 = 3.0;
    let mut spec = ScenarioSpec::m1(2, CovStructure::Diagonal, &[1], false)?;
    spec.theta_star.gamma[(1, 1)] = 1.0;
    spec.n = 10;
    let model = spec.model_spec()?;
    let data = simlab::generate(&spec, 0)?;
    let mc = McConfig::new(10_000, 7);
    let exact = loglik_linear(&spec.theta_star, &model, &data)?;
    let (approx, se) = loglik_mc(&spec.theta_star, &model, &data, &mc)?;
    let ll_ok = (approx - exact).abs() <= SE_MULT * se;

    let h = HypothesisSpec::new(vec![1]);
    let (f0, f1) = fit_pair(&model, &data, &h, None, &FitOptions::default())?;
    let lrt_exact = 2.0 * (f1.loglik - f0.loglik);
    let (lrt_mc, lrt_se) = lrt_statistic_mc(&f0.theta_hat, &f1.theta_hat, &model, &data, &mc)?;
    let lrt_ok = (lrt_mc - lrt_exact).abs() <= SE_MULT * lrt_se;
    outcome(
        ll_ok && lrt_ok,
        format!(
            "loglik {approx:.4} vs {exact:.4} (se {se:.4}); LRT {lrt_mc:.4} vs {lrt_exact:.4} (se {lrt_se:.4})"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_linear_levels() -> Result<Outcome> {
    const SE_MULT: f64 = 4.0;
    // Published ranges over both structures, per alpha.
    let ranges = [(0.008, 0.009), (0.044, 0.045), (0.089, 0.092)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (s, correlated) in [(CovStructure::Diagonal, false), (CovStructure::Full, true)] {
        let spec = ScenarioSpec::m1(2, s, &[1], correlated)?;
        let law = null_law(&spec)?;
        let sample = run_replications(&spec)?;
        let rows = score(&spec, &sample, "", |a| law.quantile(a))?;
        for (row, (lo, hi)) in rows.iter().zip(ranges) {
            let k = row.k_effective;
            let ok = row.alpha_hat >= lo - SE_MULT * binom_se(lo, k) && row.alpha_hat <= hi + SE_MULT * binom_se(hi, k);
            pass &= ok;
            detail.push(format!("{}@{}={:.3}", row.structure, row.alpha, row.alpha_hat));
        }
        pass &= sample.k_effective() == spec.k;
    }
    outcome(pass, detail.join(" "))
}

// ---------------------------------------------------------------- 8

fn c8_misspecification() -> Result<Outcome> {
    const SE_MULT: f64 = 4.0;
    let spec = ScenarioSpec::m1(2, CovStructure::Full, &[1], true)?;
    let sample = run_replications(&spec)?;
    let k = sample.k_effective();
    let wrong = ChiBarSq::from_weights(&[0.5, 0.5])?;
    let law = null_law(&spec)?;
    let wrong_rows = score(&spec, &sample, "wrong", |a| wrong.quantile(a))?;
    let right_rows = score(&spec, &sample, "correct", |a| law.quantile(a))?;
    let mut pass = true;
    let mut detail = Vec::new();
    for (alpha, target) in [(0.05, 0.174), (0.10, 0.311)] {
        let row = wrong_rows.iter().find(|r| r.alpha == alpha).unwrap();
        pass &= (row.alpha_hat - target).abs() <= SE_MULT * binom_se(target, k);
        detail.push(format!("wrong@{alpha}={:.3}", row.alpha_hat));
    }
    for row in &right_rows {
        pass &= (row.alpha_hat - row.alpha).abs() <= SE_MULT * binom_se(row.alpha, k);
        detail.push(format!("correct@{}={:.3}", row.alpha, row.alpha_hat));
    }
    outcome(pass, detail.join(" "))
}

// ---------------------------------------------------------------- 9

fn c9_nonlinear_properties() -> Result<Outcome> {
    const LEVEL_05: (f64, f64) = (0.01, 0.07);
    const LEVEL_10: (f64, f64) = (0.04, 0.12);
    const POWER_MIN: f64 = 0.9;
    const MONO_SE: f64 = 2.0;
    let spec = ScenarioSpec::m2(2, CovStructure::Diagonal, false, 0.0)?;
    let law = null_law(&spec)?;
    let sample = run_replications(&spec)?;
    let rows = score(&spec, &sample, "", |a| law.quantile(a))?;
    let at = |a: f64| rows.iter().find(|r| r.alpha == a).unwrap().alpha_hat;
    let (l05, l10) = (at(0.05), at(0.10));
    let mut pass = (LEVEL_05.0..=LEVEL_05.1).contains(&l05) && (LEVEL_10.0..=LEVEL_10.1).contains(&l10);

    let c05 = law.quantile(0.05)?;
    let mut power = Vec::new();
    for sd in [2.0, 5.0, 7.0] {
        let spec = ScenarioSpec::m2(2, CovStructure::Diagonal, false, sd)?;
        let (rate, se) = run_replications(&spec)?.rejection_rate(c05);
        power.push((sd, rate, se));
    }
    for w in power.windows(2) {
        let se = (w[0].2 * w[0].2 + w[1].2 * w[1].2).sqrt();
        pass &= w[1].1 >= w[0].1 - MONO_SE * se;
    }
    pass &= power[2].1 >= POWER_MIN;
    let p: Vec<String> = power.iter().map(|(sd, r, _)| format!("{sd}:{r:.3}")).collect();
    outcome(
        pass,
        format!("level@0.05={l05:.3} level@0.10={l10:.3} (K={}) power {}", sample.k_effective(), p.join(" ")),
    )
}

// ---------------------------------------------------------------- 10

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

fn c10_real_data() -> Result<Outcome> {
    const LRT_TOL: f64 = 0.05;
    const PVALUE_TOL: f64 = 0.05;
    let data = load_dataset(data_path("dental.csv"))?;
    let h = HypothesisSpec::new(vec![1]);
    let opts = TestOptions::default();
    let mut pass = true;
    let mut detail = Vec::new();
    for (s, want, reject) in [(CovStructure::Diagonal, 3.651, true), (CovStructure::Full, 4.178, false)] {
        let model = ModelSpec::linear(2, s.clone())?;
        let r = run_test(&model, &data, &h, None, &opts)?;
        pass &= (r.lrt - want).abs() <= LRT_TOL && r.reject == reject;
        detail.push(format!("dental {s}: LRT {:.4} p {:.4} reject {}", r.lrt, r.pvalue, r.reject));
    }
    match std::env::var("VARCOMP_COUCAL_CSV") {
        Ok(path) => {
            let data = load_dataset(&path)?;
            let model = ModelSpec::logistic(3, CovStructure::Diagonal)?;
            let h = HypothesisSpec::new(vec![1, 2]);
            let r = run_test(&model, &data, &h, Some(&McConfig::default()), &opts)?;
            pass &= !r.reject && (r.pvalue - 0.114).abs() <= PVALUE_TOL;
            detail.push(format!("coucal: LRT {:.4} p {:.4} reject {}", r.lrt, r.pvalue, r.reject));
        }
        Err(_) => detail.push("coucal: NOT RUN (data unavailable; set VARCOMP_COUCAL_CSV)".into()),
    }
    outcome(pass, detail.join("; "))
}

// ---------------------------------------------------------------- 11

/// Asymptotic two-sample Kolmogorov–Smirnov p-value. Ties are handled by
/// evaluating both empirical CDFs at every distinct value.
fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> (f64, f64) {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    (d, p.clamp(0.0, 1.0))
}

fn mixture_draws(w: &ChiBarSq, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut df = w.weights.len() - 1;
            for (k, wk) in w.weights.iter().enumerate() {
                acc += wk;
                if u < acc {
                    df = k;
                    break;
                }
            }
            if df == 0 {
                0.0
            } else {
                ChiSquared::new(df as f64).unwrap().sample(&mut rng)
            }
        })
        .collect()
}

fn c11_sampling_representation() -> Result<Outcome> {
    const N: usize = 100_000;
    const P_MIN: f64 = 0.01;
    // A projection onto the vertex gives a statistic equal to zero up to
    // rounding in the quadratic forms.
    const NUMERICAL_ZERO: f64 = 1e-9;
    let v2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let cases = [
        (Cone::orthant(2), v2.clone(), weights_closed_form(&v2)?),
        (Cone::parse("free:1,psd:1")?, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]), ChiBarSq::from_weights(&[0.0, 0.5, 0.5])?),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (idx, (cone, v, law)) in cases.into_iter().enumerate() {
        let mut stats: Vec<f64> = chibar_sample_stats(&cone, &v, N, 500 + idx as u64)?
            .into_iter()
            .map(|s| if s < NUMERICAL_ZERO { 0.0 } else { s })
            .collect();
        let mut reference = mixture_draws(&law, N, 900 + idx as u64);
        let (d, p) = ks_two_sample(&mut stats, &mut reference);
        pass &= p > P_MIN;
        detail.push(format!("{cone}: D={d:.4} p={p:.3}"));
    }
    outcome(pass, detail.join("; "))
}

// ----------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "mixture quantiles and p-values", c1_mixture_quantiles),
        (2, "closed-form weights", c2_closed_form_weights),
        (3, "Monte-Carlo weights vs closed form", c3_mc_weights_vs_closed_form),
        (4, "cone support", c4_cone_support),
        (5, "Fisher information cross-validation", c5_fim_cross_validation),
        (6, "Monte-Carlo likelihood oracle", c6_likelihood_oracle),
        (7, "linear empirical levels", c7_linear_levels),
        (8, "misspecified mixture", c8_misspecification),
        (9, "nonlinear level and power properties", c9_nonlinear_properties),
        (10, "real data", c10_real_data),
        (11, "sampling representation", c11_sampling_representation),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} {}: {name} [{:.1}s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
