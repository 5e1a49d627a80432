//! Tangent cones of the variance-component parameter space and metric
//! projections onto them.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_eigen, symmetrize};
use crate::model::CovStructure;

/// One factor of a product cone. `indices` are flat coordinates of the
/// parameter layout; for `Psd` they list the lower triangle of the matrix
/// column by column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConeFactor {
    Zero { indices: Vec<usize> },
    Free { indices: Vec<usize> },
    Orthant { indices: Vec<usize> },
    Psd { order: usize, indices: Vec<usize> },
}

impl ConeFactor {
    pub fn indices(&self) -> &[usize] {
        match self {
            ConeFactor::Zero { indices }
            | ConeFactor::Free { indices }
            | ConeFactor::Orthant { indices }
            | ConeFactor::Psd { indices, .. } => indices,
        }
    }

    fn indices_mut(&mut self) -> &mut Vec<usize> {
        match self {
            ConeFactor::Zero { indices }
            | ConeFactor::Free { indices }
            | ConeFactor::Orthant { indices }
            | ConeFactor::Psd { indices, .. } => indices,
        }
    }

    pub fn dim(&self) -> usize {
        self.indices().len()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ConeFactor::Zero { .. })
    }
}

impl fmt::Display for ConeFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConeFactor::Zero { indices } => write!(f, "Zero({})", indices.len()),
            ConeFactor::Free { indices } => write!(f, "Free({})", indices.len()),
            ConeFactor::Orthant { indices } => write!(f, "Orthant({})", indices.len()),
            ConeFactor::Psd { order, .. } => write!(f, "Psd({order})"),
        }
    }
}

/// Product cone whose factors partition `0..total_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cone {
    pub factors: Vec<ConeFactor>,
    pub total_dim: usize,
}

impl Cone {
    pub fn new(factors: Vec<ConeFactor>, total_dim: usize) -> Result<Cone> {
        let mut seen = vec![false; total_dim];
        for f in &factors {
            if let ConeFactor::Psd { order, indices } = f {
                if indices.len() != order * (order + 1) / 2 || *order == 0 {
                    return Err(Error::dim(format!(
                        "Psd({order}) factor needs {} coordinates, got {}",
                        order * (order + 1) / 2,
                        indices.len()
                    )));
                }
            }
            for &k in f.indices() {
                if k >= total_dim {
                    return Err(Error::dim(format!("cone coordinate {k} outside 0..{total_dim}")));
                }
                if std::mem::replace(&mut seen[k], true) {
                    return Err(Error::invalid(format!("cone coordinate {k} used twice")));
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("cone coordinate {k} not covered by any factor")));
        }
        let factors = factors.into_iter().filter(|f| f.dim() > 0).collect();
        Ok(Cone { factors, total_dim })
    }

    /// Factors laid out on consecutive coordinates, e.g. `zero:2,free:1,psd:1`.
    pub fn parse(spec: &str) -> Result<Cone> {
        let mut factors = Vec::new();
        let mut next = 0;
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (kind, n) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("cone factor '{item}' should look like kind:n")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad size in cone factor '{item}'")))?;
            let dim = if kind.trim() == "psd" { n * (n + 1) / 2 } else { n };
            let indices: Vec<usize> = (next..next + dim).collect();
            next += dim;
            factors.push(match kind.trim() {
                "zero" => ConeFactor::Zero { indices },
                "free" => ConeFactor::Free { indices },
                "orthant" => ConeFactor::Orthant { indices },
                "psd" => ConeFactor::Psd { order: n, indices },
                other => return Err(Error::invalid(format!("unknown cone factor '{other}'"))),
            });
        }
        if next == 0 {
            return Err(Error::invalid("empty cone specification"));
        }
        Cone::new(factors, next)
    }

    pub fn orthant(k: usize) -> Cone {
        Cone { factors: vec![ConeFactor::Orthant { indices: (0..k).collect() }], total_dim: k }
    }

    /// Largest possible degree of freedom: the dimension of the non-zero part.
    pub fn max_df(&self) -> usize {
        self.factors.iter().filter(|f| !f.is_zero()).map(ConeFactor::dim).sum()
    }

    /// The cone with its `Zero` factors removed, and the kept coordinates of
    /// the original layout in increasing order.
    pub fn reduced(&self) -> (Cone, Vec<usize>) {
        let mut kept: Vec<usize> =
            self.factors.iter().filter(|f| !f.is_zero()).flat_map(|f| f.indices().iter().copied()).collect();
        kept.sort_unstable();
        let factors = self
            .factors
            .iter()
            .filter(|f| !f.is_zero())
            .map(|f| {
                let mut g = f.clone();
                for k in g.indices_mut() {
                    *k = kept.binary_search(k).expect("kept coordinate");
                }
                g
            })
            .collect();
        (Cone { factors, total_dim: kept.len() }, kept)
    }
}

impl fmt::Display for Cone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" x "))
    }
}

/// Cone of admissible directions at a null point where the last `r` random
/// effects have zero variance, in the flat layout `(β, Γ, σ²)`.
pub fn build_cone(p: usize, r: usize, s: &CovStructure) -> Result<Cone> {
    if r == 0 || r > p {
        return Err(Error::invalid(format!("number of tested effects r = {r} must lie in 1..={p}")));
    }
    let s = s.canonical(p)?;
    let first_tested = p - r;
    let blocks = s.blocks(p);
    if matches!(s, CovStructure::BlockDiagonal { .. }) {
        if let Some(&(start, len)) = blocks.iter().find(|&&(st, b)| st < first_tested && st + b > first_tested) {
            return Err(Error::invalid(format!(
                "tested effects must be whole blocks; block {}..{} is split",
                start + 1,
                start + len
            )));
        }
    }
    let mut zero: Vec<usize> = (0..p).collect();
    let mut free = Vec::new();
    let mut orthant = Vec::new();
    let mut psd = Vec::new();
    let mut k = p;
    for &(start, len) in &blocks {
        let mut block_psd = Vec::new();
        for col in start..start + len {
            for row in col..start + len {
                match (row >= first_tested, col >= first_tested) {
                    (false, false) => zero.push(k),
                    (true, false) => free.push(k),
                    _ if len == 1 => orthant.push(k),
                    _ => block_psd.push(k),
                }
                k += 1;
            }
        }
        if !block_psd.is_empty() {
            let order = start + len - first_tested.max(start);
            psd.push(ConeFactor::Psd { order, indices: block_psd });
        }
    }
    let mut factors = vec![ConeFactor::Zero { indices: zero }];
    if !free.is_empty() {
        factors.push(ConeFactor::Free { indices: free });
    }
    if !orthant.is_empty() {
        factors.push(ConeFactor::Orthant { indices: orthant });
    }
    factors.extend(psd);
    factors.push(ConeFactor::Zero { indices: vec![k] });
    Cone::new(factors, k + 1)
}

/// `r × q` matrix picking the tested variances (last `r` effects) out of the
/// flat layout. Defined for diagonal structures only.
pub fn selection_matrix(p: usize, r: usize, s: &CovStructure) -> Result<DMatrix<f64>> {
    if r == 0 || r > p {
        return Err(Error::invalid(format!("number of tested effects r = {r} must lie in 1..={p}")));
    }
    let s = s.canonical(p)?;
    if s != CovStructure::Diagonal {
        return Err(Error::invalid(
            "a selection matrix is defined for diagonal structures only; use Monte-Carlo weights",
        ));
    }
    let q = 2 * p + 1;
    let mut m = DMatrix::zeros(r, q);
    for t in 0..r {
        m[(t, 2 * p - r + t)] = 1.0;
    }
    Ok(m)
}

/// Projection onto the constrained part after `Zero` and `Free` coordinates
/// have been eliminated.
#[derive(Debug, Clone)]
enum Block {
    Orthant(Vec<usize>),
    Psd { order: usize, pos: Vec<usize> },
}

/// Precomputed metric projector `argmin_{θ ∈ C} (z−θ)ᵗ V⁻¹ (z−θ)`.
#[derive(Debug, Clone)]
pub(crate) struct Projector {
    q: usize,
    metric: DMatrix<f64>,
    zero: Vec<usize>,
    rest: Vec<usize>,
    shift: DMatrix<f64>,
    free: Vec<usize>,
    cons: Vec<usize>,
    back: DMatrix<f64>,
    scale: Vec<f64>,
    kmetric: DMatrix<f64>,
    step: f64,
    blocks: Vec<Block>,
    faces: Option<Vec<Face>>,
}

/// A face of a small orthant: free set and the map from the target to the
/// free coordinates of the minimizer.
#[derive(Debug, Clone)]
struct Face {
    free: Vec<usize>,
    active: Vec<usize>,
    solve: DMatrix<f64>,
}

const MAX_ITER: usize = 10_000;
const EXACT_ORTHANT_DIM: usize = 6;

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

impl Projector {
    pub fn new(cone: &Cone, v: &DMatrix<f64>) -> Result<Projector> {
        let q = cone.total_dim;
        if v.nrows() != q || v.ncols() != q {
            return Err(Error::dim(format!("metric is {}x{}, cone has dimension {q}", v.nrows(), v.ncols())));
        }
        let metric = spd_inverse(v)?;
        let mut zero = Vec::new();
        let mut free_idx = Vec::new();
        let mut cons_idx = Vec::new();
        for f in &cone.factors {
            match f {
                ConeFactor::Zero { indices } => zero.extend(indices),
                ConeFactor::Free { indices } => free_idx.extend(indices),
                ConeFactor::Orthant { indices } | ConeFactor::Psd { indices, .. } => cons_idx.extend(indices),
            }
        }
        zero.sort_unstable();
        let mut rest: Vec<usize> = free_idx.iter().chain(&cons_idx).copied().collect();
        rest.sort_unstable();
        let pos_in_rest = |k: usize| rest.binary_search(&k).expect("coordinate in rest");
        let free: Vec<usize> = free_idx.iter().map(|&k| pos_in_rest(k)).collect();
        let cons: Vec<usize> = cons_idx.iter().map(|&k| pos_in_rest(k)).collect();

        let q_ss = sub(&metric, &rest, &rest);
        let shift = if zero.is_empty() || rest.is_empty() {
            DMatrix::zeros(rest.len(), zero.len())
        } else {
            spd_inverse(&q_ss)? * sub(&metric, &rest, &zero)
        };
        let (back, schur) = if free.is_empty() {
            (DMatrix::zeros(0, cons.len()), sub(&q_ss, &cons, &cons))
        } else {
            let qff_inv = spd_inverse(&sub(&q_ss, &free, &free))?;
            let qfk = sub(&q_ss, &free, &cons);
            let back = -(&qff_inv * &qfk);
            let schur = sub(&q_ss, &cons, &cons) - qfk.transpose() * &qff_inv * &qfk;
            (back, symmetrize(&schur))
        };

        // Constrained coordinates in svec scaling: off-diagonal PSD entries ×√2.
        let mut scale = vec![1.0; cons.len()];
        let mut blocks = Vec::new();
        let mut orth = Vec::new();
        let mut t = 0;
        for f in &cone.factors {
            match f {
                ConeFactor::Orthant { indices } => {
                    orth.extend(t..t + indices.len());
                    t += indices.len();
                }
                ConeFactor::Psd { order, indices } => {
                    let pos: Vec<usize> = (t..t + indices.len()).collect();
                    let mut c = 0;
                    for col in 0..*order {
                        for row in col..*order {
                            if row != col {
                                scale[t + c] = std::f64::consts::SQRT_2;
                            }
                            c += 1;
                        }
                    }
                    t += indices.len();
                    blocks.push(Block::Psd { order: *order, pos });
                }
                _ => {}
            }
        }
        if !orth.is_empty() {
            blocks.insert(0, Block::Orthant(orth));
        }
        let kmetric = DMatrix::from_fn(cons.len(), cons.len(), |i, j| schur[(i, j)] / (scale[i] * scale[j]));
        let lmax = if cons.is_empty() { 1.0 } else { sym_eigen(&kmetric).0.max() };
        if !(lmax > 0.0) {
            return Err(Error::numeric("projection metric is not positive definite"));
        }
        let only_orthant = blocks.iter().all(|b| matches!(b, Block::Orthant(_)));
        let faces = if only_orthant && cons.len() >= 2 && cons.len() <= EXACT_ORTHANT_DIM {
            Some(enumerate_faces(&kmetric)?)
        } else {
            None
        };
        Ok(Projector {
            q,
            metric,
            zero,
            rest,
            shift,
            free,
            cons,
            back,
            scale,
            kmetric,
            step: 1.0 / (2.0 * lmax),
            blocks,
            faces,
        })
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    /// Returns `(projection, squared metric distance)`.
    pub fn project(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.q {
            return Err(Error::dim(format!("point has length {}, cone dimension {}", z.len(), self.q)));
        }
        let zs: Vec<f64> = self.rest.iter().map(|&k| z[k]).collect();
        let zz: Vec<f64> = self.zero.iter().map(|&k| z[k]).collect();
        let mut c = zs;
        if !zz.is_empty() {
            for (i, ci) in c.iter_mut().enumerate() {
                *ci += (0..zz.len()).map(|j| self.shift[(i, j)] * zz[j]).sum::<f64>();
            }
        }
        let a: Vec<f64> = self.cons.iter().zip(&self.scale).map(|(&i, s)| c[i] * s).collect();
        let u = self.solve_constrained(&a)?;
        let theta_k: Vec<f64> = u.iter().zip(&self.scale).map(|(v, s)| v / s).collect();
        let d_k: Vec<f64> = self.cons.iter().zip(&theta_k).map(|(&i, t)| c[i] - t).collect();
        let mut theta_s = vec![0.0; c.len()];
        for (t, &i) in self.cons.iter().enumerate() {
            theta_s[i] = theta_k[t];
        }
        for (f, &i) in self.free.iter().enumerate() {
            let d_f: f64 = (0..d_k.len()).map(|j| self.back[(f, j)] * d_k[j]).sum();
            theta_s[i] = c[i] - d_f;
        }
        let mut proj = vec![0.0; self.q];
        for (t, &k) in self.rest.iter().enumerate() {
            proj[k] = theta_s[t];
        }
        let resid = DVector::from_iterator(self.q, z.iter().zip(&proj).map(|(a, b)| a - b));
        let pr = &self.metric * &resid;
        let dist2 = resid.dot(&pr).max(0.0);
        let kkt = DVector::from_column_slice(&proj).dot(&pr);
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let zp = DVector::from_column_slice(z);
        let zpz = zp.dot(&(&self.metric * &zp));
        if kkt.abs() > 1e-8 * z2.max(zpz) + 1e-300 {
            return Err(Error::Convergence(format!("cone projection did not converge (orthogonality residual {kkt:.3e})")));
        }
        Ok((proj, dist2))
    }

    fn project_euclid(&self, u: &mut [f64]) {
        for b in &self.blocks {
            match b {
                Block::Orthant(pos) => {
                    for &i in pos {
                        u[i] = u[i].max(0.0);
                    }
                }
                Block::Psd { order, pos } => {
                    let m = svec_to_mat(*order, pos.iter().map(|&i| u[i]));
                    let (vals, vecs) = sym_eigen(&m);
                    let vals = vals.map(|v| v.max(0.0));
                    let m = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
                    for (i, v) in pos.iter().zip(mat_to_svec(&m)) {
                        u[*i] = v;
                    }
                }
            }
        }
    }

    fn solve_constrained(&self, a: &[f64]) -> Result<Vec<f64>> {
        let k = a.len();
        if k == 0 {
            return Ok(Vec::new());
        }
        if k == 1 {
            return Ok(vec![a[0].max(0.0)]);
        }
        if let Some(faces) = &self.faces {
            return Ok(self.solve_faces(faces, a));
        }
        let m = &self.kmetric;
        let grad = |y: &[f64]| -> Vec<f64> {
            (0..k).map(|i| 2.0 * (0..k).map(|j| m[(i, j)] * (y[j] - a[j])).sum::<f64>()).collect()
        };
        let anorm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if anorm == 0.0 {
            return Ok(vec![0.0; k]);
        }
        let mut x = a.to_vec();
        self.project_euclid(&mut x);
        let mut y = x.clone();
        let mut t = 1.0_f64;
        for _ in 0..MAX_ITER {
            let g = grad(&y);
            let mut xn: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - self.step * gi).collect();
            self.project_euclid(&mut xn);
            let diff: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let dn = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dn <= 1e-13 * anorm {
                return Ok(self.polish(xn, a));
            }
            let restart = y.iter().zip(&xn).zip(&diff).map(|((yi, xi), d)| (yi - xi) * d).sum::<f64>() > 0.0;
            if restart {
                t = 1.0;
                y = xn.clone();
            } else {
                let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let mom = (t - 1.0) / tn;
                y = xn.iter().zip(&diff).map(|(xi, d)| xi + mom * d).collect();
                t = tn;
            }
            x = xn;
        }
        Err(Error::Convergence(format!("cone projection hit the {MAX_ITER}-iteration cap")))
    }

    /// Exact re-solve on the orthant face identified by an iterative solution.
    fn polish(&self, u: Vec<f64>, a: &[f64]) -> Vec<f64> {
        let Some(Block::Orthant(pos)) = self.blocks.first() else {
            return u;
        };
        if self.blocks.len() != 1 {
            return u;
        }
        let tiny = 1e-12 * u.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        let free: Vec<usize> = pos.iter().copied().filter(|&i| u[i] > tiny).collect();
        let active: Vec<usize> = pos.iter().copied().filter(|&i| u[i] <= tiny).collect();
        let Ok(face) = make_face(&self.kmetric, free, active) else {
            return u;
        };
        self.face_solution(&face, a).unwrap_or(u)
    }

    fn face_solution(&self, face: &Face, a: &[f64]) -> Option<Vec<f64>> {
        let k = a.len();
        let mut u = vec![0.0; k];
        for (t, &i) in face.free.iter().enumerate() {
            u[i] = a[i] + face.active.iter().enumerate().map(|(s, &j)| face.solve[(t, s)] * a[j]).sum::<f64>();
            if u[i] < 0.0 {
                return None;
            }
        }
        let m = &self.kmetric;
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * m.amax();
        for &i in &face.active {
            let g: f64 = (0..k).map(|j| m[(i, j)] * (u[j] - a[j])).sum();
            if g < -1e-12 * scale {
                return None;
            }
        }
        Some(u)
    }

    fn solve_faces(&self, faces: &[Face], a: &[f64]) -> Vec<f64> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for face in faces {
            if let Some(u) = self.face_solution(face, a) {
                return u;
            }
            // Keep the best feasible candidate in case rounding rejects all faces.
            let mut u = vec![0.0; a.len()];
            for (t, &i) in face.free.iter().enumerate() {
                u[i] = (a[i] + face.active.iter().enumerate().map(|(s, &j)| face.solve[(t, s)] * a[j]).sum::<f64>())
                    .max(0.0);
            }
            let d = DVector::from_iterator(a.len(), a.iter().zip(&u).map(|(x, y)| x - y));
            let val = d.dot(&(&self.kmetric * &d));
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, u));
            }
        }
        best.expect("at least one face").1
    }
}

fn make_face(m: &DMatrix<f64>, free: Vec<usize>, active: Vec<usize>) -> Result<Face> {
    let solve = if free.is_empty() || active.is_empty() {
        DMatrix::zeros(free.len(), active.len())
    } else {
        spd_inverse(&sub(m, &free, &free))? * sub(m, &free, &active)
    };
    Ok(Face { free, active, solve })
}

fn enumerate_faces(m: &DMatrix<f64>) -> Result<Vec<Face>> {
    let k = m.nrows();
    (0..1usize << k)
        .map(|mask| {
            let free: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 1).collect();
            let active: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 0).collect();
            make_face(m, free, active)
        })
        .collect()
}

/// Symmetric matrix from scaled lower-triangle coordinates (off-diagonals ×√2).
fn svec_to_mat(order: usize, vals: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(order, order);
    let mut it = vals;
    for col in 0..order {
        for row in col..order {
            let v = it.next().expect("svec length");
            if row == col {
                m[(row, col)] = v;
            } else {
                m[(row, col)] = v / std::f64::consts::SQRT_2;
                m[(col, row)] = v / std::f64::consts::SQRT_2;
            }
        }
    }
    m
}

fn mat_to_svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for col in 0..n {
        for row in col..n {
            out.push(if row == col { m[(row, col)] } else { m[(row, col)] * std::f64::consts::SQRT_2 });
        }
    }
    out
}

/// Symmetric matrix of a `Psd` factor from unscaled flat coordinates.
pub(crate) fn psd_block(order: usize, vals: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(order, order);
    let mut c = 0;
    for col in 0..order {
        for row in col..order {
            m[(row, col)] = vals[c];
            m[(col, row)] = vals[c];
            c += 1;
        }
    }
    m
}

/// Metric projection of `z` onto `cone` under `V⁻¹`; returns the projection
/// and `(z−θ)ᵗV⁻¹(z−θ)` at the minimizer.
pub fn project_cone(z: &[f64], cone: &Cone, v: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    Projector::new(cone, v)?.project(z)
}
