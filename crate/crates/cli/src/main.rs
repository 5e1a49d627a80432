//! `varcomp`: fit mixed-effects models, test zero variance components and run
//! the simulation experiments from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Map, Value};

use varcomp_core::simlab::{self, Measure};
use varcomp_core::{
    fit_with, load_dataset, run_test, weights_closed_form, weights_mc, ChiBarSq, Cone,
    CovStructure, Dataset, Error as CoreError, FimMethod, FimSource, FisherInfo, FitOptions,
    HypothesisSpec, LimitLaw, McConfig, ModelSpec, TestOptions, WeightMethod, VERSION,
};

const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "varcomp", version, about = "Likelihood ratio tests for variance components")]
struct Cli {
    /// Seed for every random stream (falls back to VARCOMP_SEED, then 1).
    #[arg(long, global = true, env = "VARCOMP_SEED")]
    seed: Option<u64>,
    /// Worker threads for replications and Monte-Carlo work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file with option values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the main output to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model by maximum likelihood, optionally under a null hypothesis.
    Fit(FitArgs),
    /// Likelihood ratio test that the variances of some effects are zero.
    Test(TestArgs),
    /// Chi-bar-square utilities.
    Chibar {
        #[arg(value_enum)]
        what: ChibarWhat,
        #[command(flatten)]
        args: ChibarArgs,
    },
    /// Run a simulation experiment and emit its table as CSV.
    Simulate(SimulateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ChibarWhat {
    Quantile,
    Pvalue,
    Weights,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Linear,
    Logistic,
    Quadratic,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WeightsArg {
    Auto,
    Closed,
    Mc,
    Tail,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FimMethodArg {
    Hessian,
    Score,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ModelArgs {
    /// Long-format CSV with columns id, x, y.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Number of random effects.
    #[arg(long)]
    p: Option<usize>,
    /// diag, full or block:sizes (e.g. block:2,1).
    #[arg(long)]
    structure: Option<String>,
    /// Monte-Carlo draws per individual (nonlinear models).
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// One-based effects whose variance is fixed at zero.
    #[arg(long, value_delimiter = ',')]
    null_tested: Option<Vec<usize>>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// One-based effects whose variances are tested.
    #[arg(long, value_delimiter = ',')]
    tested: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    /// Evaluate the information at the alternative fit instead of the null fit.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fim_at_alternative: Option<bool>,
    #[arg(long, value_enum)]
    fim_method: Option<FimMethodArg>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ChibarArgs {
    /// Mixture weights w0,w1,... over chi2_0, chi2_1, ...
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Correlation matrix file, or rho=VALUE for an equicorrelated matrix.
    #[arg(long)]
    corr: Option<String>,
    /// Dimension of the orthant (with --corr rho=VALUE).
    #[arg(long)]
    r: Option<usize>,
    /// Cone such as zero:2,free:1,psd:2 (with --fim).
    #[arg(long)]
    cone: Option<String>,
    /// Fisher information: JSON (object with "matrix" or array of rows) or text rows.
    #[arg(long)]
    fim: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Statistic value for pvalue.
    #[arg(long)]
    t: Option<f64>,
    /// Monte-Carlo draws when weights are simulated.
    #[arg(long)]
    samples: Option<usize>,
    /// Print a JSON report instead of the bare value.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    json: Option<bool>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SimulateArgs {
    /// table1, table2, table3, table4, table5 or power.
    #[arg(long)]
    scenario: Option<String>,
    /// Replications per column.
    #[arg(long = "K", alias = "k")]
    #[serde(rename = "K")]
    k: Option<usize>,
    /// Individuals per dataset.
    #[arg(long = "N", alias = "n")]
    #[serde(rename = "N")]
    n: Option<usize>,
    /// Also write level/power points as a gnuplot data file.
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

/// Overlays the flags that were given on the config file values.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, file: &Map<String, Value>) -> Result<(T, Value)> {
    let mut merged = file.clone();
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    let merged = Value::Object(merged);
    let resolved = serde_json::from_value(merged.clone()).context("invalid configuration")?;
    Ok((resolved, merged))
}

fn load_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => bail!("{}: configuration must be a JSON object", path.display()),
    }
}

/// Six significant digits, without trailing zeros.
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    format!("{rounded}")
}

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn emit_json(&self, v: &Value) -> Result<()> {
        self.emit(&(serde_json::to_string_pretty(v)? + "\n"))
    }
}

struct Loaded {
    model: ModelSpec,
    data: Dataset,
    mc: Option<McConfig>,
}

fn load_model(a: &ModelArgs, seed: u64) -> Result<Loaded> {
    let path = a.data.as_ref().ok_or_else(|| anyhow!("--data is required"))?;
    let kind = a.model.ok_or_else(|| anyhow!("--model is required"))?;
    let p = a.p.ok_or_else(|| anyhow!("--p is required"))?;
    let structure = CovStructure::parse(a.structure.as_deref().unwrap_or("diag"))?;
    let model = match kind {
        ModelKind::Linear => ModelSpec::linear(p, structure)?,
        ModelKind::Logistic => ModelSpec::logistic(p, structure)?,
        ModelKind::Quadratic => ModelSpec::quadratic(p, structure)?,
    };
    let data = load_dataset(path)?;
    let mc = (!model.is_linear()).then(|| McConfig {
        m: a.mc_samples.unwrap_or(McConfig::default().m),
        seed,
        ..McConfig::default()
    });
    Ok(Loaded { model, data, mc })
}

fn header(ctx: &Ctx, config: &Value) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("version".into(), json!(VERSION));
    m.insert("seed".into(), json!(ctx.seed));
    m.insert("config".into(), config.clone());
    m
}

/// Exit status for a fit that ran but did not converge.
struct NotConverged;

fn cmd_fit(ctx: &Ctx, a: &FitArgs, config: &Value) -> Result<Option<NotConverged>> {
    let l = load_model(&a.model, ctx.seed)?;
    let h = a.null_tested.as_deref().map(HypothesisSpec::from_one_based).transpose()?;
    if let Some(h) = &h {
        h.validate(l.model.p, &l.model.structure)?;
    }
    let opts = FitOptions { seed: ctx.seed, ..FitOptions::default() };
    let fit = fit_with(&l.model, &l.data, h.as_ref(), l.mc.as_ref(), None, &opts)?;
    let converged = fit.converged;
    let mut out = header(ctx, config);
    out.insert("model".into(), json!(l.model.mean.label()));
    out.insert("structure".into(), json!(l.model.structure.label()));
    out.insert("fit".into(), serde_json::to_value(&fit)?);
    ctx.emit_json(&Value::Object(out))?;
    Ok((!converged).then_some(NotConverged))
}

fn cmd_test(ctx: &Ctx, a: &TestArgs, config: &Value) -> Result<()> {
    let l = load_model(&a.model, ctx.seed)?;
    let tested = a.tested.as_deref().ok_or_else(|| anyhow!("--tested is required"))?;
    let h = HypothesisSpec::from_one_based(tested)?;
    let defaults = TestOptions::default();
    let opts = TestOptions {
        alpha: a.alpha.unwrap_or(defaults.alpha),
        weights: match a.weights.unwrap_or(WeightsArg::Auto) {
            WeightsArg::Auto => WeightMethod::Auto,
            WeightsArg::Closed => WeightMethod::ClosedForm,
            WeightsArg::Mc => WeightMethod::MonteCarlo,
            WeightsArg::Tail => WeightMethod::Tail,
        },
        fim_point: if a.fim_at_alternative.unwrap_or(false) {
            varcomp_core::lrt::FimPoint::Alternative
        } else {
            varcomp_core::lrt::FimPoint::Null
        },
        fim_method: match a.fim_method.unwrap_or(FimMethodArg::Hessian) {
            FimMethodArg::Hessian => FimMethod::NumericalHessian,
            FimMethodArg::Score => FimMethod::ScoreOuterProduct,
        },
        seed: ctx.seed,
        fit: FitOptions { seed: ctx.seed, ..FitOptions::default() },
        ..defaults
    };
    let report = run_test(&l.model, &l.data, &h, l.mc.as_ref(), &opts)?;
    let mut out = header(ctx, config);
    out.insert("report".into(), serde_json::to_value(&report)?);
    ctx.emit_json(&Value::Object(out))
}

/// Matrix from JSON (`{"matrix": rows}` or bare rows) or whitespace/comma text.
fn read_matrix(path: &Path) -> Result<nalgebra::DMatrix<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = text.trim_start();
    let rows: Vec<Vec<f64>> = if trimmed.starts_with('{') {
        let v: Value = serde_json::from_str(&text)?;
        serde_json::from_value(v.get("matrix").cloned().ok_or_else(|| anyhow!("no \"matrix\" key"))?)?
    } else if trimmed.starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|l| {
                l.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>().map_err(|_| anyhow!("non-numeric entry '{t}'")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    };
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        bail!("{}: expected a non-empty square matrix", path.display());
    }
    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

enum Law {
    Mixture(ChiBarSq),
    Cone(LimitLaw),
}

impl Law {
    fn weights(&self) -> &ChiBarSq {
        match self {
            Law::Mixture(w) => w,
            Law::Cone(l) => &l.weights,
        }
    }

    fn quantile(&self, alpha: f64) -> Result<f64> {
        Ok(match self {
            Law::Mixture(w) => w.quantile(alpha)?,
            Law::Cone(l) => l.quantile(alpha)?,
        })
    }

    fn pvalue(&self, t: f64) -> f64 {
        match self {
            Law::Mixture(w) => w.pvalue(t),
            Law::Cone(l) => l.pvalue(t),
        }
    }
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

fn chibar_law(ctx: &Ctx, a: &ChibarArgs) -> Result<Law> {
    let samples = a.samples.unwrap_or(TestOptions::default().weight_samples);
    let given = [a.weights.is_some(), a.corr.is_some(), a.cone.is_some()].iter().filter(|b| **b).count();
    if given != 1 {
        bail!("give exactly one of --weights, --corr or --cone");
    }
    if let Some(w) = &a.weights {
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > WEIGHT_SUM_TOL {
            bail!("weights must be nonnegative and sum to 1 (got sum {total})");
        }
        return Ok(Law::Mixture(ChiBarSq::from_weights(w)?));
    }
    if let Some(c) = &a.corr {
        let corr = match c.strip_prefix("rho=") {
            Some(rho) => {
                let rho: f64 = rho.parse().map_err(|_| anyhow!("bad correlation '{rho}'"))?;
                let r = a.r.ok_or_else(|| anyhow!("--corr rho=VALUE needs --r"))?;
                if r == 0 {
                    bail!("--r must be positive");
                }
                let mut m = nalgebra::DMatrix::from_element(r, r, rho);
                m.fill_diagonal(1.0);
                m
            }
            None => read_matrix(Path::new(c))?,
        };
        if let Some(r) = a.r {
            if r != corr.nrows() {
                bail!("--r {r} does not match the {}x{} correlation matrix", corr.nrows(), corr.nrows());
            }
        }
        let w = if corr.nrows() <= 3 {
            weights_closed_form(&corr)?
        } else {
            weights_mc(&Cone::orthant(corr.nrows()), &corr, samples, ctx.seed)?
        };
        return Ok(Law::Mixture(w));
    }
    let cone = Cone::parse(a.cone.as_deref().unwrap_or_default())?;
    let opts = TestOptions { seed: ctx.seed, weight_samples: samples, ..TestOptions::default() };
    let info = match &a.fim {
        Some(path) => Some(FisherInfo {
            matrix: read_matrix(path)?,
            source: FimSource::Analytic,
            clipped: false,
            one_sided: Vec::new(),
        }),
        None => None,
    };
    if info.is_none() && LimitLaw::needs_fisher(&cone, opts.weights) {
        bail!("the cone {cone} needs --fim");
    }
    Ok(Law::Cone(LimitLaw::new(cone, info.as_ref(), &opts)?))
}

fn cmd_chibar(ctx: &Ctx, what: ChibarWhat, a: &ChibarArgs, config: &Value) -> Result<()> {
    let law = chibar_law(ctx, a)?;
    let alpha = a.alpha.unwrap_or(0.05);
    let (key, value) = match what {
        ChibarWhat::Quantile => ("quantile", json!(law.quantile(alpha)?)),
        ChibarWhat::Pvalue => {
            let t = a.t.ok_or_else(|| anyhow!("pvalue needs --t"))?;
            ("pvalue", json!(law.pvalue(t)))
        }
        ChibarWhat::Weights => ("weights", json!(law.weights().weights)),
    };
    if a.json.unwrap_or(false) {
        let mut out = header(ctx, config);
        out.insert(key.into(), value);
        out.insert("weights".into(), serde_json::to_value(law.weights())?);
        if let Law::Cone(l) = &law {
            out.insert("pvalue_method".into(), serde_json::to_value(l.pvalue_method)?);
        }
        return ctx.emit_json(&Value::Object(out));
    }
    let line = match value {
        Value::Array(ws) => ws.iter().map(|w| sig6(w.as_f64().unwrap_or(f64::NAN))).collect::<Vec<_>>().join(","),
        v => sig6(v.as_f64().unwrap_or(f64::NAN)),
    };
    ctx.emit(&format!("{line}\n"))
}

fn cmd_simulate(ctx: &Ctx, a: &SimulateArgs, config: &Value) -> Result<()> {
    let name = a.scenario.as_deref().ok_or_else(|| anyhow!("--scenario is required"))?;
    let mut columns = simlab::scenario(name)?;
    for c in &mut columns {
        if let Some(k) = a.k {
            c.spec.k = k;
        }
        if let Some(n) = a.n {
            c.spec.n = n;
        }
        c.spec.seed = ctx.seed;
        if let Some(mc) = &mut c.spec.mc {
            mc.seed = ctx.seed;
        }
        c.spec.fit.seed = ctx.seed;
    }
    let mut csv = String::new();
    let _ = writeln!(csv, "# varcomp {VERSION} scenario={name} seed={}", ctx.seed);
    let _ = writeln!(csv, "# config={}", serde_json::to_string(config)?);
    let mut summary = String::new();
    let mut plot = String::new();
    let mut wrote_header = false;
    for (i, col) in columns.iter().enumerate() {
        let label = col.spec.label.clone();
        let total_cols = columns.len();
        let (rows, sample) = simlab::run_column_with(col, |done, total| {
            if done == total || done % (total / 10).max(1) == 0 {
                eprintln!("[{}/{total_cols}] {label}: {done}/{total}", i + 1);
            }
        })?;
        let table = simlab::rows_to_csv(&rows);
        let mut lines = table.lines();
        let head = lines.next().unwrap_or_default();
        if !wrote_header {
            let _ = writeln!(csv, "column,{head}");
            wrote_header = true;
        }
        for line in lines {
            let _ = writeln!(csv, "\"{label}\",{line}");
        }
        if sample.dropped > 0 {
            let _ = writeln!(summary, "# {label}: dropped {} of {} replications", sample.dropped, sample.requested);
        }
        let kind = match col.measure {
            Measure::Level => "level",
            Measure::Misspecified(_) => "misspecified level",
            Measure::Power => "power",
        };
        for r in &col.references {
            if let Some(row) = rows.iter().find(|row| row.alpha == r.alpha) {
                let _ = writeln!(
                    summary,
                    "# {label} [{kind}, {}] alpha={}: ours {:.4} (se {:.4}), published {}",
                    row.law, r.alpha, row.alpha_hat, row.se, r.value
                );
            }
        }
        let _ = writeln!(plot, "# {label} ({kind})\n# alpha alpha_hat se published");
        for row in &rows {
            let published = col.references.iter().find(|r| r.alpha == row.alpha).map(|r| r.value);
            let _ = writeln!(
                plot,
                "{} {} {} {}",
                row.alpha,
                row.alpha_hat,
                row.se,
                published.map_or("NaN".to_string(), |v| v.to_string())
            );
        }
        plot.push_str("\n\n");
    }
    csv.push_str(&summary);
    if let Some(path) = &a.gnuplot {
        std::fs::write(path, plot).with_context(|| format!("writing {}", path.display()))?;
    }
    ctx.emit(&csv)
}

enum Failure {
    Input(anyhow::Error),
    Convergence(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    if matches!(e.downcast_ref::<CoreError>(), Some(CoreError::Convergence(_))) {
        Failure::Convergence(e)
    } else {
        Failure::Input(e)
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let file = load_config(cli.config.as_deref()).map_err(Failure::Input)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => match file.get("seed") {
            Some(v) => v.as_u64().ok_or_else(|| Failure::Input(anyhow!("config seed must be an integer")))?,
            None => DEFAULT_SEED,
        },
    };
    let jobs = cli.jobs.or_else(|| file.get("jobs").and_then(Value::as_u64).map(|j| j as usize));
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(Failure::Input(anyhow!("--jobs must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Input(anyhow!(e)))?;
    }
    let ctx = Ctx { seed, out: cli.out };
    // The embedded config records the seed and the defaults that were used.
    let with_seed = |mut v: Value| {
        if let Value::Object(m) = &mut v {
            m.insert("seed".into(), json!(seed));
            m.remove("jobs");
            if m.contains_key("model") {
                m.entry("structure").or_insert(json!("diag"));
            }
        }
        v
    };
    match cli.command {
        Command::Fit(a) => {
            let (a, cfg) = resolve(&a, &file).map_err(Failure::Input)?;
            match cmd_fit(&ctx, &a, &with_seed(cfg)).map_err(classify)? {
                Some(NotConverged) => Err(Failure::Convergence(anyhow!("fit did not converge"))),
                None => Ok(()),
            }
        }
        Command::Test(a) => {
            let (a, mut cfg) = resolve(&a, &file).map_err(Failure::Input)?;
            if let Value::Object(m) = &mut cfg {
                m.entry("alpha").or_insert(json!(TestOptions::default().alpha));
            }
            cmd_test(&ctx, &a, &with_seed(cfg)).map_err(classify)
        }
        Command::Chibar { what, args } => {
            let (a, cfg) = resolve(&args, &file).map_err(Failure::Input)?;
            cmd_chibar(&ctx, what, &a, &with_seed(cfg)).map_err(classify)
        }
        Command::Simulate(a) => {
            let (a, cfg) = resolve(&a, &file).map_err(Failure::Input)?;
            cmd_simulate(&ctx, &a, &with_seed(cfg)).map_err(classify)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Convergence(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_failures_map_to_their_own_exit_status() {
        let e = anyhow::Error::from(CoreError::Convergence("stalled".into())).context("fitting");
        assert!(matches!(classify(e), Failure::Convergence(_)));
        assert!(matches!(classify(anyhow!("bad flag")), Failure::Input(_)));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(2.705543454095404), "2.70554");
        assert_eq!(sig6(0.25), "0.25");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn flags_override_config_values() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"alpha": 0.1, "t": 2.0}"#).unwrap();
        let flags = ChibarArgs { alpha: Some(0.01), ..ChibarArgs::default() };
        let (a, merged) = resolve(&flags, &file).unwrap();
        assert_eq!(a.alpha, Some(0.01));
        assert_eq!(a.t, Some(2.0));
        assert_eq!(merged["alpha"], json!(0.01));
    }
}
