//! Per-individual Fisher information `I*` in the flat parameter ordering.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{McConfig, McEngine};
use crate::linalg::{clip_eigen_floor, matrix_rows, spd_inverse, sym_eigen, symmetrize};
use crate::model::{Dataset, ModelSpec, Theta};

/// Eigenvalues below this fraction of the largest are raised to it.
pub const PSD_FLOOR: f64 = 1e-8;
/// Negative eigenvalues beyond this fraction of the largest are an error.
const INDEFINITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimSource {
    Analytic,
    NumericalHessian,
    ScoreOuterProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimMethod {
    #[default]
    NumericalHessian,
    ScoreOuterProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    #[serde(with = "matrix_rows")]
    pub matrix: DMatrix<f64>,
    pub source: FimSource,
    /// Set when small or negative eigenvalues were raised to the floor.
    pub clipped: bool,
    /// Flat coordinates differenced one-sidedly (parameters on the boundary).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub one_sided: Vec<usize>,
}

impl FisherInfo {
    pub fn q(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.matrix)
    }

    /// The same information expressed in a permuted flat layout, where
    /// `map[k]` is the old index of new coordinate `k`.
    pub fn reindexed(&self, map: &[usize]) -> FisherInfo {
        let q = map.len();
        FisherInfo {
            matrix: DMatrix::from_fn(q, q, |a, b| self.matrix[(map[a], map[b])]),
            source: self.source,
            clipped: self.clipped,
            one_sided: self
                .one_sided
                .iter()
                .filter_map(|o| map.iter().position(|m| m == o))
                .collect(),
        }
    }
}

/// Analytic information of a linear mixed model, averaged over individuals.
pub fn fim_linear(theta: &Theta, model: &ModelSpec, data: &Dataset) -> Result<FisherInfo> {
    if !model.is_linear() {
        return Err(Error::invalid("analytic information requires a linear model"));
    }
    let prepared = model.prepare(data)?;
    let p = model.p;
    let q = model.q();
    let positions = model.structure.param_positions(p);
    let n = prepared.n() as f64;
    let mut info = DMatrix::zeros(q, q);
    let mut groups: Vec<(DMatrix<f64>, f64)> = Vec::new();
    for i in 0..prepared.n() {
        let x = prepared.design(i).expect("linear design");
        match groups.iter_mut().find(|(g, _)| g == x) {
            Some((_, c)) => *c += 1.0,
            None => groups.push((x.clone(), 1.0)),
        }
    }
    for (x, count) in groups {
        let j = x.nrows();
        let omega = &x * &theta.gamma * x.transpose() + DMatrix::identity(j, j) * theta.sigma2;
        let inv = spd_inverse(&omega)?;
        let w = count / n;
        let xb = x.transpose() * &inv * &x;
        for a in 0..p {
            for b in 0..p {
                info[(a, b)] += w * xb[(a, b)];
            }
        }
        let mut derivs: Vec<DMatrix<f64>> = positions
            .iter()
            .map(|&(k, l)| {
                let (ck, cl) = (x.column(k), x.column(l));
                let mut d = ck * cl.transpose();
                if k != l {
                    d += cl * ck.transpose();
                }
                &inv * d
            })
            .collect();
        derivs.push(inv.clone());
        for (ia, ba) in derivs.iter().enumerate() {
            for (ib, bb) in derivs.iter().enumerate().skip(ia) {
                let t = 0.5 * w * (ba * bb).trace();
                info[(p + ia, p + ib)] += t;
                if ia != ib {
                    info[(p + ib, p + ia)] += t;
                }
            }
        }
    }
    Ok(FisherInfo { matrix: info, source: FimSource::Analytic, clipped: false, one_sided: Vec::new() })
}

/// Finite-difference stencil: offsets in units of the step and their weights.
#[derive(Debug, Clone)]
struct Stencil {
    h: f64,
    first: Vec<(f64, f64)>,
    second: Vec<(f64, f64)>,
}

impl Stencil {
    fn central(h: f64) -> Self {
        Stencil { h, first: vec![(-1.0, -0.5), (1.0, 0.5)], second: vec![(-1.0, 1.0), (0.0, -2.0), (1.0, 1.0)] }
    }

    fn forward(h: f64) -> Self {
        Stencil {
            h,
            first: vec![(0.0, -1.5), (1.0, 2.0), (2.0, -0.5)],
            second: vec![(0.0, 2.0), (1.0, -5.0), (2.0, 4.0), (3.0, -1.0)],
        }
    }
}

fn boundary_coords(theta: &Theta, model: &ModelSpec) -> Vec<usize> {
    let p = model.p;
    model
        .structure
        .param_positions(p)
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| i == j && theta.gamma[(i, i)] <= 0.0)
        .map(|(k, _)| p + k)
        .collect()
}

/// Information from finite differences of the fixed-draw Monte-Carlo
/// log-likelihood. Variances sitting at zero are differenced one-sidedly.
pub fn fim_numerical(
    theta: &Theta,
    model: &ModelSpec,
    data: &Dataset,
    mc: &McConfig,
    method: FimMethod,
) -> Result<FisherInfo> {
    let prepared = model.prepare(data)?;
    let engine = McEngine::new(prepared, mc)?;
    let s = &model.structure;
    let p = model.p;
    let flat = theta.flatten(s);
    let q = flat.len();
    let n = engine.prepared.n() as f64;
    let one_sided = boundary_coords(theta, model);
    let stencils: Vec<Stencil> = (0..q)
        .map(|a| {
            let h = 1e-4 * (1.0 + flat[a].abs());
            if one_sided.contains(&a) {
                Stencil::forward(h)
            } else {
                Stencil::central(h)
            }
        })
        .collect();
    let units_at = |shift: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut v = flat.clone();
        for &(a, d) in shift {
            v[a] += d;
        }
        let t = Theta::unflatten(&v, s, p)?;
        Ok(engine.units(&t)?.into_iter().map(|u| u.0).collect())
    };

    let matrix = match method {
        FimMethod::NumericalHessian => {
            let total = |shift: &[(usize, f64)]| -> Result<f64> { Ok(units_at(shift)?.iter().sum()) };
            let f0 = total(&[])?;
            let pairs: Vec<(usize, usize)> = (0..q).flat_map(|a| (a..q).map(move |b| (a, b))).collect();
            let entries: Vec<Result<f64>> = pairs
                .par_iter()
                .map(|&(a, b)| {
                    let (sa, sb) = (&stencils[a], &stencils[b]);
                    let mut acc = 0.0;
                    if a == b {
                        for &(o, w) in &sa.second {
                            let f = if o == 0.0 { f0 } else { total(&[(a, o * sa.h)])? };
                            acc += w * f;
                        }
                        Ok(acc / (sa.h * sa.h))
                    } else {
                        for &(oa, wa) in &sa.first {
                            for &(ob, wb) in &sb.first {
                                let f = if oa == 0.0 && ob == 0.0 {
                                    f0
                                } else {
                                    total(&[(a, oa * sa.h), (b, ob * sb.h)])?
                                };
                                acc += wa * wb * f;
                            }
                        }
                        Ok(acc / (sa.h * sb.h))
                    }
                })
                .collect();
            let mut hess = DMatrix::zeros(q, q);
            for (&(a, b), v) in pairs.iter().zip(entries) {
                let v = v?;
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
            -hess / n
        }
        FimMethod::ScoreOuterProduct => {
            let base = units_at(&[])?;
            let mut scores = DMatrix::zeros(base.len(), q);
            for (a, st) in stencils.iter().enumerate() {
                let mut col = vec![0.0; base.len()];
                for &(o, w) in &st.first {
                    let u = if o == 0.0 { base.clone() } else { units_at(&[(a, o * st.h)])? };
                    for (c, v) in col.iter_mut().zip(u) {
                        *c += w * v / st.h;
                    }
                }
                scores.set_column(a, &nalgebra::DVector::from_vec(col));
            }
            scores.transpose() * &scores / n
        }
    };
    let matrix = symmetrize(&matrix);
    let (vals, _) = sym_eigen(&matrix);
    let (lo, hi) = (vals.min(), vals.max());
    if hi <= 0.0 || lo < -INDEFINITE_TOL * hi {
        return Err(Error::numeric(format!(
            "numerical information is indefinite (eigenvalues {lo:.3e}..{hi:.3e}); increase the Monte-Carlo size or the number of individuals"
        )));
    }
    let (matrix, clipped) = clip_eigen_floor(&matrix, PSD_FLOOR);
    let source = match method {
        FimMethod::NumericalHessian => FimSource::NumericalHessian,
        FimMethod::ScoreOuterProduct => FimSource::ScoreOuterProduct,
    };
    Ok(FisherInfo { matrix, source, clipped, one_sided })
}

/// `V = R I⁻¹ Rᵗ` and its correlation matrix for a 0/1 selection matrix `R`.
pub fn extract_correlation(info: &FisherInfo, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = info.q();
    if r.ncols() != q {
        return Err(Error::dim(format!("selection matrix has {} columns, information is {q}x{q}", r.ncols())));
    }
    for row in r.row_iter() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != q {
            return Err(Error::invalid("selection matrix rows must contain exactly one 1"));
        }
    }
    let inv = info.inverse()?;
    let v = symmetrize(&(r * inv * r.transpose()));
    Ok((v.clone(), correlation(&v)?))
}

pub(crate) fn correlation(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = v.nrows();
    if (0..k).any(|i| v[(i, i)] <= 0.0) {
        return Err(Error::numeric("covariance has a non-positive variance"));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            (v[(i, j)] / (v[(i, i)] * v[(j, j)]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovStructure, Individual};
    use nalgebra::DVector;

    #[test]
    fn location_scale_information() {
        let model = ModelSpec::linear(1, CovStructure::Diagonal).unwrap();
        let data = Dataset::new(vec![Individual::new("a", vec![0.0], vec![0.3]).unwrap()]).unwrap();
        let sigma2 = 2.5;
        let theta = Theta::new(DVector::zeros(1), DMatrix::zeros(1, 1), sigma2).unwrap();
        let info = fim_linear(&theta, &model, &data).unwrap();
        assert!((info.matrix[(0, 0)] - 1.0 / sigma2).abs() < 1e-14);
        assert!((info.matrix[(2, 2)] - 1.0 / (2.0 * sigma2 * sigma2)).abs() < 1e-14);
        assert_eq!(info.matrix[(0, 2)], 0.0);
    }

    #[test]
    fn ragged_panels_sum_per_individual_terms() {
        let model = ModelSpec::linear(1, CovStructure::Diagonal).unwrap();
        let one = Individual::new("a", vec![0.0], vec![0.3]).unwrap();
        let two = Individual::new("b", vec![0.0, 1.0], vec![0.3, 0.1]).unwrap();
        let theta = Theta::new(DVector::zeros(1), DMatrix::identity(1, 1), 1.0).unwrap();
        let info = |inds: Vec<Individual>| {
            fim_linear(&theta, &model, &Dataset::new(inds).unwrap()).unwrap().matrix
        };
        let both = info(vec![one.clone(), two.clone()]);
        let avg = (info(vec![one]) + info(vec![two])) * 0.5;
        assert!((both - avg).norm() < 1e-14);
    }

    #[test]
    fn identity_information_gives_identity_correlation() {
        let info = FisherInfo {
            matrix: DMatrix::identity(5, 5),
            source: FimSource::Analytic,
            clipped: false,
            one_sided: vec![],
        };
        let mut r = DMatrix::zeros(2, 5);
        r[(0, 3)] = 1.0;
        r[(1, 4)] = 1.0;
        let (_, c) = extract_correlation(&info, &r).unwrap();
        assert_eq!(c, DMatrix::identity(2, 2));
    }

    #[test]
    fn two_by_two_correlation_sign() {
        let c = 0.3;
        let info = FisherInfo {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0]),
            source: FimSource::Analytic,
            clipped: false,
            one_sided: vec![],
        };
        let (_, corr) = extract_correlation(&info, &DMatrix::identity(2, 2)).unwrap();
        // Inverse of [[1,c],[c,1]] is [[1,-c],[-c,1]]/(1-c²).
        assert!((corr[(0, 1)] + c).abs() < 1e-14);
    }

    #[test]
    fn selection_must_pick_one_coordinate_per_row() {
        let info = FisherInfo {
            matrix: DMatrix::identity(3, 3),
            source: FimSource::Analytic,
            clipped: false,
            one_sided: vec![],
        };
        let bad = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        assert!(extract_correlation(&info, &bad).is_err());
    }
}
