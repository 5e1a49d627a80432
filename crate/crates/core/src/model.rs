//! Datasets, model specifications, parameter vectors and hypotheses.
//!
//! The flat parameter ordering defined here is shared by every other module:
//! `β_1..β_p`, then the covariance parameters of `Γ` block by block (lower
//! triangle, column-major inside each block; a diagonal structure is the
//! special case of `p` blocks of size one), then `σ²`.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue tolerance used when validating positive semi-definiteness.
pub const TOL_PSD: f64 = 1e-10;

/// Longitudinal observations of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Extra per-observation covariates, indexed `[column][observation]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<Vec<f64>>,
}

impl Individual {
    pub fn new(id: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ind = Individual { id: id.into(), x, y, covariates: Vec::new() };
        ind.validate()?;
        Ok(ind)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::invalid(format!("individual '{}' has no observations", self.id)));
        }
        if self.x.len() != self.y.len() {
            return Err(Error::dim(format!(
                "individual '{}': x has {} entries but y has {}",
                self.id,
                self.x.len(),
                self.y.len()
            )));
        }
        if self.covariates.iter().any(|c| c.len() != self.y.len()) {
            return Err(Error::dim(format!("individual '{}': covariate length mismatch", self.id)));
        }
        Ok(())
    }
}

/// A collection of individuals, each with its own observation vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub individuals: Vec<Individual>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        let ds = Dataset { individuals, covariate_names: Vec::new() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.individuals.is_empty() {
            return Err(Error::invalid("dataset has no individuals"));
        }
        for ind in &self.individuals {
            ind.validate()?;
            if ind.covariates.len() != self.covariate_names.len() {
                return Err(Error::dim(format!(
                    "individual '{}' has {} covariate columns, dataset declares {}",
                    ind.id,
                    ind.covariates.len(),
                    self.covariate_names.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of individuals `N`.
    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn total_observations(&self) -> usize {
        self.individuals.iter().map(Individual::len).sum()
    }

    /// Common number of observations per individual, or a ragged-panel error.
    pub fn balanced_j(&self) -> Result<usize> {
        let j = self.individuals.first().map(Individual::len).unwrap_or(0);
        if let Some(bad) = self.individuals.iter().find(|ind| ind.len() != j) {
            return Err(Error::RaggedPanel(format!(
                "individual '{}' has {} observations, expected {}",
                bad.id,
                bad.len(),
                j
            )));
        }
        Ok(j)
    }

    /// Concatenates two datasets (covariate columns must agree).
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.covariate_names != other.covariate_names {
            return Err(Error::dim("covariate columns differ between datasets"));
        }
        let mut individuals = self.individuals.clone();
        individuals.extend(other.individuals.iter().cloned());
        Ok(Dataset { individuals, covariate_names: self.covariate_names.clone() })
    }
}

/// Loads a long-format CSV file with header `id,x,y[,covariate...]`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    parse_long_csv(file)
}

/// Parses long-format CSV data. Rows are grouped by `id` (first-appearance
/// order) and sorted by `x` within each individual; ties keep file order.
pub fn parse_long_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Load(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Load(format!("missing column '{name}'")))
    };
    let (id_col, x_col, y_col) = (find("id")?, find("x")?, find("y")?);
    let extra: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| ![id_col, x_col, y_col].contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    struct Rows {
        id: String,
        rows: Vec<(f64, f64, Vec<f64>)>,
    }
    let mut groups: Vec<Rows> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Load(e.to_string()))?;
        let row = line + 2;
        let num = |col: usize, name: &str| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.parse::<f64>().map_err(|_| {
                Error::Load(format!("row {row}, column '{name}': non-numeric value '{cell}'"))
            })
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Load(format!("row {row}: empty id")));
        }
        let x = num(x_col, "x")?;
        let y = num(y_col, "y")?;
        let cov = extra.iter().map(|(c, name)| num(*c, name)).collect::<Result<Vec<_>>>()?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            groups.push(Rows { id, rows: Vec::new() });
            groups.len() - 1
        });
        groups[slot].rows.push((x, y, cov));
    }
    if groups.is_empty() {
        return Err(Error::Load("file contains no data rows".into()));
    }

    let individuals = groups
        .into_iter()
        .map(|mut g| {
            g.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut covariates = vec![Vec::with_capacity(g.rows.len()); extra.len()];
            for (_, _, cov) in &g.rows {
                for (c, v) in cov.iter().enumerate() {
                    covariates[c].push(*v);
                }
            }
            Individual {
                id: g.id,
                x: g.rows.iter().map(|r| r.0).collect(),
                y: g.rows.iter().map(|r| r.1).collect(),
                covariates,
            }
        })
        .collect();
    let ds = Dataset { individuals, covariate_names: extra.into_iter().map(|(_, n)| n).collect() };
    ds.validate()?;
    Ok(ds)
}

/// Covariance structure of the random effects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovStructure {
    Diagonal,
    Full,
    BlockDiagonal { block_sizes: Vec<usize> },
}

impl CovStructure {
    /// Validates against `p` and collapses degenerate block layouts.
    pub fn canonical(&self, p: usize) -> Result<CovStructure> {
        match self {
            CovStructure::BlockDiagonal { block_sizes } => {
                if block_sizes.contains(&0) {
                    return Err(Error::invalid("block sizes must be positive"));
                }
                let total: usize = block_sizes.iter().sum();
                if total != p {
                    return Err(Error::dim(format!("block sizes sum to {total}, expected p = {p}")));
                }
                if block_sizes.len() == 1 {
                    Ok(CovStructure::Full)
                } else if block_sizes.iter().all(|&b| b == 1) {
                    Ok(CovStructure::Diagonal)
                } else {
                    Ok(self.clone())
                }
            }
            other => Ok(other.clone()),
        }
    }

    /// Blocks as `(start, len)` pairs covering `0..p`.
    pub fn blocks(&self, p: usize) -> Vec<(usize, usize)> {
        match self {
            CovStructure::Diagonal => (0..p).map(|k| (k, 1)).collect(),
            CovStructure::Full => vec![(0, p)],
            CovStructure::BlockDiagonal { block_sizes } => {
                let mut start = 0;
                block_sizes
                    .iter()
                    .map(|&b| {
                        let blk = (start, b);
                        start += b;
                        blk
                    })
                    .collect()
            }
        }
    }

    /// Positions `(row, col)` with `row >= col` of the free entries of `Γ`,
    /// in flat order.
    pub fn param_positions(&self, p: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (start, len) in self.blocks(p) {
            for col in start..start + len {
                for row in col..start + len {
                    out.push((row, col));
                }
            }
        }
        out
    }

    pub fn n_params(&self, p: usize) -> usize {
        self.blocks(p).iter().map(|&(_, b)| b * (b + 1) / 2).sum()
    }

    /// Whether entry `(i, j)` of `Γ` is structurally free.
    pub fn allows(&self, p: usize, i: usize, j: usize) -> bool {
        self.blocks(p).iter().any(|&(s, b)| (s..s + b).contains(&i) && (s..s + b).contains(&j))
    }

    /// Parses `diag`, `full` or `block:2,1`.
    pub fn parse(s: &str) -> Result<CovStructure> {
        let s = s.trim();
        match s {
            "diag" | "diagonal" => Ok(CovStructure::Diagonal),
            "full" => Ok(CovStructure::Full),
            _ => {
                let sizes = s
                    .strip_prefix("block:")
                    .ok_or_else(|| Error::invalid(format!("unknown covariance structure '{s}'")))?;
                let block_sizes = sizes
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::invalid(format!("bad block size '{t}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CovStructure::BlockDiagonal { block_sizes })
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            CovStructure::Diagonal => "diag".into(),
            CovStructure::Full => "full".into(),
            CovStructure::BlockDiagonal { block_sizes } => format!(
                "block:{}",
                block_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Full parameter vector `(β, Γ, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ThetaRepr", try_from = "ThetaRepr")]
pub struct Theta {
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
}

#[derive(Serialize, Deserialize)]
struct ThetaRepr {
    beta: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    sigma2: f64,
}

impl From<Theta> for ThetaRepr {
    fn from(t: Theta) -> Self {
        ThetaRepr {
            beta: t.beta.iter().copied().collect(),
            gamma: t.gamma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma2: t.sigma2,
        }
    }
}

impl TryFrom<ThetaRepr> for Theta {
    type Error = Error;
    fn try_from(r: ThetaRepr) -> Result<Theta> {
        let p = r.beta.len();
        if r.gamma.len() != p || r.gamma.iter().any(|row| row.len() != p) {
            return Err(Error::dim("gamma must be p x p"));
        }
        let gamma = DMatrix::from_fn(p, p, |i, j| r.gamma[i][j]);
        Ok(Theta { beta: DVector::from_vec(r.beta), gamma, sigma2: r.sigma2 })
    }
}

impl Theta {
    pub fn new(beta: DVector<f64>, gamma: DMatrix<f64>, sigma2: f64) -> Result<Theta> {
        let p = beta.len();
        if gamma.nrows() != p || gamma.ncols() != p {
            return Err(Error::dim(format!(
                "gamma is {}x{}, expected {p}x{p}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        Ok(Theta { beta, gamma, sigma2 })
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Dimension `q` of the flat vector under structure `s`.
    pub fn q(s: &CovStructure, p: usize) -> usize {
        p + s.n_params(p) + 1
    }

    /// Checks symmetry, positive semi-definiteness, `σ² > 0` and the zero
    /// pattern implied by `s`.
    pub fn validate(&self, s: &CovStructure) -> Result<()> {
        let p = self.p();
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta has non-finite entries"));
        }
        let scale = self.gamma.amax().max(f64::MIN_POSITIVE);
        for i in 0..p {
            for j in 0..p {
                let v = self.gamma[(i, j)];
                if !v.is_finite() {
                    return Err(Error::invalid("gamma has non-finite entries"));
                }
                if (v - self.gamma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("gamma is not symmetric"));
                }
                if !s.allows(p, i, j) && v != 0.0 {
                    return Err(Error::invalid(format!(
                        "gamma[{i},{j}] = {v} violates the {s} structure"
                    )));
                }
            }
        }
        check_psd(&self.gamma)
    }

    /// Flattens in the canonical order.
    pub fn flatten(&self, s: &CovStructure) -> Vec<f64> {
        let p = self.p();
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(s.param_positions(p).into_iter().map(|(i, j)| self.gamma[(i, j)]));
        v.push(self.sigma2);
        v
    }

    /// Inverse of [`Theta::flatten`].
    pub fn unflatten(v: &[f64], s: &CovStructure, p: usize) -> Result<Theta> {
        let q = Theta::q(s, p);
        if v.len() != q {
            return Err(Error::dim(format!("flat vector has length {}, expected {q}", v.len())));
        }
        let beta = DVector::from_column_slice(&v[..p]);
        let mut gamma = DMatrix::zeros(p, p);
        for (k, (i, j)) in s.param_positions(p).into_iter().enumerate() {
            gamma[(i, j)] = v[p + k];
            gamma[(j, i)] = v[p + k];
        }
        Ok(Theta { beta, gamma, sigma2: v[q - 1] })
    }

    /// Flat index of `Γ[i,j]` under `s`, if it is a parameter.
    pub fn gamma_flat_index(s: &CovStructure, p: usize, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        s.param_positions(p).iter().position(|&pos| pos == (r, c)).map(|k| p + k)
    }
}

pub(crate) fn check_psd(g: &DMatrix<f64>) -> Result<()> {
    if g.nrows() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(g.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -TOL_PSD * max.max(1.0) {
        return Err(Error::invalid(format!(
            "matrix is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Random effects whose variances (and covariances) are tested to be zero.
/// Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    pub tested: Vec<usize>,
}

impl HypothesisSpec {
    pub fn new(mut tested: Vec<usize>) -> Self {
        tested.sort_unstable();
        HypothesisSpec { tested }
    }

    /// Builds from one-based indices, as used on the command line.
    pub fn from_one_based(idx: &[usize]) -> Result<Self> {
        if idx.contains(&0) {
            return Err(Error::invalid("tested indices are one-based"));
        }
        Ok(HypothesisSpec::new(idx.iter().map(|i| i - 1).collect()))
    }

    pub fn r(&self) -> usize {
        self.tested.len()
    }

    pub fn is_tested(&self, k: usize) -> bool {
        self.tested.contains(&k)
    }

    pub fn validate(&self, p: usize, s: &CovStructure) -> Result<()> {
        if self.tested.is_empty() {
            return Err(Error::invalid("at least one random effect must be tested"));
        }
        let mut seen = vec![false; p];
        for &k in &self.tested {
            if k >= p {
                return Err(Error::invalid(format!(
                    "tested index {} out of range 1..={p}",
                    k + 1
                )));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::invalid(format!("tested index {} repeated", k + 1)));
            }
        }
        // Inside a full block any subset may be tested; block-diagonal
        // layouts must test whole blocks.
        if !matches!(s, CovStructure::BlockDiagonal { .. }) {
            return Ok(());
        }
        for (start, len) in s.blocks(p) {
            let hit = (start..start + len).filter(|k| seen[*k]).count();
            if hit != 0 && hit != len {
                return Err(Error::invalid(format!(
                    "tested effects must be a union of whole blocks; block starting at {} is split",
                    start + 1
                )));
            }
        }
        Ok(())
    }
}

/// Reordering of the random effects: position `k` holds original effect `order[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectPermutation {
    pub order: Vec<usize>,
}

impl EffectPermutation {
    pub fn identity(p: usize) -> Self {
        EffectPermutation { order: (0..p).collect() }
    }

    /// Untested effects first (original order), then tested ones.
    pub fn tested_last(p: usize, h: &HypothesisSpec) -> Self {
        let mut order: Vec<usize> = (0..p).filter(|k| !h.is_tested(*k)).collect();
        order.extend((0..p).filter(|k| h.is_tested(*k)));
        EffectPermutation { order }
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &o)| k == o)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.order.len()];
        for (k, &o) in self.order.iter().enumerate() {
            inv[o] = k;
        }
        EffectPermutation { order: inv }
    }

    pub fn apply_theta(&self, theta: &Theta) -> Theta {
        let o = &self.order;
        let p = o.len();
        Theta {
            beta: DVector::from_fn(p, |k, _| theta.beta[o[k]]),
            gamma: DMatrix::from_fn(p, p, |i, j| theta.gamma[(o[i], o[j])]),
            sigma2: theta.sigma2,
        }
    }

    pub fn apply_hypothesis(&self, h: &HypothesisSpec) -> HypothesisSpec {
        let inv = self.inverse();
        HypothesisSpec::new(h.tested.iter().map(|&k| inv.order[k]).collect())
    }

    /// Block structure seen in the permuted order. Blocks must stay contiguous.
    pub fn apply_structure(&self, s: &CovStructure) -> Result<CovStructure> {
        let p = self.order.len();
        match s {
            CovStructure::BlockDiagonal { .. } => {
                let blocks = s.blocks(p);
                let block_of = |e: usize| blocks.iter().position(|&(st, b)| (st..st + b).contains(&e));
                let mut sizes = Vec::new();
                let mut k = 0;
                while k < p {
                    let b = block_of(self.order[k]).expect("effect outside blocks");
                    let len = blocks[b].1;
                    if k + len > p || (k..k + len).any(|t| block_of(self.order[t]) != Some(b)) {
                        return Err(Error::invalid("permutation splits a covariance block"));
                    }
                    sizes.push(len);
                    k += len;
                }
                Ok(CovStructure::BlockDiagonal { block_sizes: sizes })
            }
            other => Ok(other.clone()),
        }
    }

    /// For each flat index of the permuted layout, the matching flat index of
    /// the original layout.
    pub fn flat_index_map(&self, s: &CovStructure) -> Result<Vec<usize>> {
        let p = self.order.len();
        let ps = self.apply_structure(s)?;
        let mut map: Vec<usize> = self.order.clone();
        for (i, j) in ps.param_positions(p) {
            let old = Theta::gamma_flat_index(s, p, self.order[i], self.order[j])
                .ok_or_else(|| Error::invalid("permuted entry is not a parameter"))?;
            map.push(old);
        }
        map.push(Theta::q(s, p) - 1);
        Ok(map)
    }
}

/// Moves the tested effects to the last `r` positions of `β` and `Γ`.
pub fn permute_to_tested_last(theta: &Theta, h: &HypothesisSpec) -> Result<(Theta, EffectPermutation)> {
    let p = theta.p();
    if let Some(&bad) = h.tested.iter().find(|&&k| k >= p) {
        return Err(Error::invalid(format!("tested index {} out of range 1..={p}", bad + 1)));
    }
    let perm = EffectPermutation::tested_last(p, h);
    Ok((perm.apply_theta(theta), perm))
}

/// Signature of a user-supplied nonlinear mean `g(φ, x)`.
pub type MeanFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// Signature of a user-supplied design builder.
pub type DesignFn = Arc<dyn Fn(&Individual) -> DMatrix<f64> + Send + Sync>;

/// Design used by linear models, `y_i = X_i φ_i + ε_i` with `φ_i ~ N(β, Γ)`.
#[derive(Clone)]
pub enum LinearDesign {
    /// Columns `1, x, x², …, x^{p-1}`.
    Polynomial,
    /// Named columns; `"1"` is the intercept and `"x"` the main covariate.
    Columns(Vec<String>),
    Custom(DesignFn),
}

#[derive(Clone)]
pub enum NonlinearMean {
    /// `φ1 / (1 + exp(-(x - φ2)/φ3))`; with two effects the scale is fixed.
    LogisticGrowth { fixed_scale: Option<f64> },
    /// `φ1 + φ2 x (+ φ3 x²)`, evaluated through the Monte-Carlo path.
    QuadraticLinear,
    Custom(MeanFn),
}

#[derive(Clone)]
pub enum MeanFunction {
    Linear(LinearDesign),
    Nonlinear(NonlinearMean),
}

impl fmt::Debug for MeanFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl MeanFunction {
    pub fn label(&self) -> String {
        match self {
            MeanFunction::Linear(LinearDesign::Polynomial) => "linear".into(),
            MeanFunction::Linear(LinearDesign::Columns(c)) => format!("linear[{}]", c.join(",")),
            MeanFunction::Linear(LinearDesign::Custom(_)) => "linear[custom]".into(),
            MeanFunction::Nonlinear(NonlinearMean::LogisticGrowth { fixed_scale: Some(s) }) => {
                format!("logistic[scale={s}]")
            }
            MeanFunction::Nonlinear(NonlinearMean::LogisticGrowth { .. }) => "logistic".into(),
            MeanFunction::Nonlinear(NonlinearMean::QuadraticLinear) => "quadratic".into(),
            MeanFunction::Nonlinear(NonlinearMean::Custom(_)) => "nonlinear[custom]".into(),
        }
    }
}

/// Default fixed growth scale for the two-effect logistic model.
pub const DEFAULT_LOGISTIC_SCALE: f64 = 150.0;

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub mean: MeanFunction,
    pub p: usize,
    pub structure: CovStructure,
    /// Position `k` of the model's effect vector holds effect `order[k]` of
    /// the underlying mean function.
    effect_order: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(mean: MeanFunction, p: usize, structure: CovStructure) -> Result<ModelSpec> {
        if p == 0 {
            return Err(Error::invalid("p must be at least 1"));
        }
        if let MeanFunction::Nonlinear(NonlinearMean::LogisticGrowth { fixed_scale }) = &mean {
            match (p, fixed_scale) {
                (3, None) => {}
                (2, Some(s)) if *s > 0.0 => {}
                _ => {
                    return Err(Error::invalid(
                        "logistic growth needs p = 3, or p = 2 with a positive fixed scale",
                    ))
                }
            }
        }
        if let MeanFunction::Linear(LinearDesign::Columns(cols)) = &mean {
            if cols.len() != p {
                return Err(Error::dim(format!("{} design columns for p = {p}", cols.len())));
            }
        }
        let structure = structure.canonical(p)?;
        Ok(ModelSpec { mean, p, structure, effect_order: None })
    }

    /// Random-coefficient polynomial model with exact likelihood.
    pub fn linear(p: usize, structure: CovStructure) -> Result<ModelSpec> {
        ModelSpec::new(MeanFunction::Linear(LinearDesign::Polynomial), p, structure)
    }

    /// Logistic growth; `p = 2` fixes the scale at [`DEFAULT_LOGISTIC_SCALE`].
    pub fn logistic(p: usize, structure: CovStructure) -> Result<ModelSpec> {
        let fixed_scale = (p == 2).then_some(DEFAULT_LOGISTIC_SCALE);
        ModelSpec::new(MeanFunction::Nonlinear(NonlinearMean::LogisticGrowth { fixed_scale }), p, structure)
    }

    pub fn quadratic(p: usize, structure: CovStructure) -> Result<ModelSpec> {
        ModelSpec::new(MeanFunction::Nonlinear(NonlinearMean::QuadraticLinear), p, structure)
    }

    pub fn with_structure(&self, structure: CovStructure) -> Result<ModelSpec> {
        let mut m = self.clone();
        m.structure = structure.canonical(self.p)?;
        Ok(m)
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.mean, MeanFunction::Linear(_))
    }

    pub fn q(&self) -> usize {
        Theta::q(&self.structure, self.p)
    }

    /// The same model with its effects reordered by `perm`.
    pub fn permuted(&self, perm: &EffectPermutation) -> Result<ModelSpec> {
        if perm.order.len() != self.p {
            return Err(Error::dim("permutation length differs from p"));
        }
        let base = self.effect_order.clone().unwrap_or_else(|| (0..self.p).collect());
        let order: Vec<usize> = perm.order.iter().map(|&k| base[k]).collect();
        let identity = order.iter().enumerate().all(|(k, &o)| k == o);
        Ok(ModelSpec {
            mean: self.mean.clone(),
            p: self.p,
            structure: perm.apply_structure(&self.structure)?,
            effect_order: (!identity).then_some(order),
        })
    }

    fn design_for(&self, ind: &Individual, cov_names: &[String]) -> Result<DMatrix<f64>> {
        let j = ind.len();
        let raw = match &self.mean {
            MeanFunction::Linear(LinearDesign::Polynomial) => {
                DMatrix::from_fn(j, self.p, |r, c| ind.x[r].powi(c as i32))
            }
            MeanFunction::Linear(LinearDesign::Columns(cols)) => {
                let mut m = DMatrix::zeros(j, self.p);
                for (c, name) in cols.iter().enumerate() {
                    for r in 0..j {
                        m[(r, c)] = match name.as_str() {
                            "1" => 1.0,
                            "x" => ind.x[r],
                            other => {
                                let k = cov_names.iter().position(|n| n == other).ok_or_else(|| {
                                    Error::invalid(format!("unknown design column '{other}'"))
                                })?;
                                ind.covariates[k][r]
                            }
                        };
                    }
                }
                m
            }
            MeanFunction::Linear(LinearDesign::Custom(f)) => {
                let m = f(ind);
                if m.nrows() != j || m.ncols() != self.p {
                    return Err(Error::dim(format!(
                        "custom design is {}x{}, expected {j}x{}",
                        m.nrows(),
                        m.ncols(),
                        self.p
                    )));
                }
                m
            }
            MeanFunction::Nonlinear(_) => return Err(Error::invalid("model has no linear design")),
        };
        Ok(match &self.effect_order {
            Some(order) => DMatrix::from_fn(j, self.p, |r, c| raw[(r, order[c])]),
            None => raw,
        })
    }

    /// Binds the model to a dataset for repeated evaluation.
    pub fn prepare<'a>(&'a self, data: &'a Dataset) -> Result<PreparedModel<'a>> {
        data.validate()?;
        let units = data
            .individuals
            .iter()
            .map(|ind| {
                let design = if self.is_linear() {
                    Some(self.design_for(ind, &data.covariate_names)?)
                } else {
                    None
                };
                Ok(Unit { x: &ind.x, y: &ind.y, design })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedModel { model: self, units })
    }

    /// Conditional mean `g(φ, x_i)` for one individual.
    pub fn conditional_mean(&self, ind: &Individual, phi: &[f64]) -> Result<Vec<f64>> {
        let data = Dataset { individuals: vec![ind.clone()], covariate_names: Vec::new() };
        let prepared = self.prepare(&data)?;
        let mut out = vec![0.0; ind.len()];
        prepared.mean_into(0, phi, &mut out, None);
        Ok(out)
    }
}

pub(crate) struct Unit<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub design: Option<DMatrix<f64>>,
}

/// A model bound to a dataset; design matrices are built once.
pub struct PreparedModel<'a> {
    pub(crate) model: &'a ModelSpec,
    pub(crate) units: Vec<Unit<'a>>,
}

impl<'a> PreparedModel<'a> {
    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn p(&self) -> usize {
        self.model.p
    }

    pub fn observations(&self, i: usize) -> &[f64] {
        self.units[i].y
    }

    pub fn design(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.units[i].design.as_ref()
    }

    /// Writes `g(φ, x_i)` into `mean`, and optionally the row-major `J×p`
    /// Jacobian `∂g_j/∂φ_k` into `jac`.
    pub fn mean_into(&self, i: usize, phi: &[f64], mean: &mut [f64], jac: Option<&mut [f64]>) {
        let unit = &self.units[i];
        let p = self.model.p;
        if let Some(d) = &unit.design {
            for (r, m) in mean.iter_mut().enumerate() {
                *m = (0..p).map(|c| d[(r, c)] * phi[c]).sum();
            }
            if let Some(jac) = jac {
                for r in 0..mean.len() {
                    for c in 0..p {
                        jac[r * p + c] = d[(r, c)];
                    }
                }
            }
            return;
        }
        let MeanFunction::Nonlinear(nl) = &self.model.mean else {
            unreachable!("linear units always carry a design")
        };
        match &self.model.effect_order {
            None => eval_nonlinear(nl, p, unit.x, phi, mean, jac),
            Some(order) => {
                let mut raw = vec![0.0; p];
                for (k, &o) in order.iter().enumerate() {
                    raw[o] = phi[k];
                }
                match jac {
                    None => eval_nonlinear(nl, p, unit.x, &raw, mean, None),
                    Some(jac) => {
                        let mut raw_jac = vec![0.0; jac.len()];
                        eval_nonlinear(nl, p, unit.x, &raw, mean, Some(&mut raw_jac));
                        for r in 0..mean.len() {
                            for (k, &o) in order.iter().enumerate() {
                                jac[r * p + k] = raw_jac[r * p + o];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn eval_nonlinear(
    nl: &NonlinearMean,
    p: usize,
    x: &[f64],
    phi: &[f64],
    mean: &mut [f64],
    jac: Option<&mut [f64]>,
) {
    match nl {
        NonlinearMean::LogisticGrowth { fixed_scale } => {
            let (a, mid) = (phi[0], phi[1]);
            let scale = fixed_scale.unwrap_or_else(|| phi[2]);
            match jac {
                None => {
                    for (m, &xj) in mean.iter_mut().zip(x) {
                        *m = a * sigmoid((xj - mid) / scale);
                    }
                }
                Some(jac) => {
                    for (j, (m, &xj)) in mean.iter_mut().zip(x).enumerate() {
                        let s = sigmoid((xj - mid) / scale);
                        *m = a * s;
                        let ds = a * s * (1.0 - s) / scale;
                        jac[j * p] = s;
                        jac[j * p + 1] = -ds;
                        if p == 3 {
                            jac[j * p + 2] = -ds * (xj - mid) / scale;
                        }
                    }
                }
            }
        }
        NonlinearMean::QuadraticLinear => {
            for (j, (m, &xj)) in mean.iter_mut().zip(x).enumerate() {
                let mut pow = 1.0;
                let mut v = 0.0;
                for &ph in phi.iter().take(p) {
                    v += ph * pow;
                    pow *= xj;
                }
                *m = v;
                let _ = j;
            }
            if let Some(jac) = jac {
                for (j, &xj) in x.iter().enumerate() {
                    let mut pow = 1.0;
                    for k in 0..p {
                        jac[j * p + k] = pow;
                        pow *= xj;
                    }
                }
            }
        }
        NonlinearMean::Custom(g) => {
            for (m, &xj) in mean.iter_mut().zip(x) {
                *m = g(phi, xj);
            }
            if let Some(jac) = jac {
                let mut work = phi.to_vec();
                for k in 0..p {
                    let h = 1e-6 * (1.0 + phi[k].abs());
                    for (j, &xj) in x.iter().enumerate() {
                        work[k] = phi[k] + h;
                        let up = g(&work, xj);
                        work[k] = phi[k] - h;
                        let dn = g(&work, xj);
                        jac[j * p + k] = (up - dn) / (2.0 * h);
                    }
                    work[k] = phi[k];
                }
            }
        }
    }
}
