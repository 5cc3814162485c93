//! Finite-rank spline bases: thin plate regression splines in 2-D, cubic
//! regression splines in 1-D, null-space shrinkage, and the joint
//! parameterization used by deformations.

mod cubic;
mod tprs;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::linalg::{self, EIGEN_REL_TOL};
use crate::reml::PenaltyBlock;

pub use cubic::build_cubic_1d;
pub use tprs::build_tprs;

/// Default factor applied to the smallest nonzero penalty eigenvalue when
/// shrinking the null space.
pub const DEFAULT_SHRINKAGE_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    ThinPlate2d,
    Cubic1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub rank: usize,
    pub inputs: Vec<String>,
    pub shrinkage: bool,
    pub deformation_constraints: bool,
}

impl BasisSpec {
    pub fn thin_plate(rank: usize) -> Self {
        Self {
            kind: BasisKind::ThinPlate2d,
            rank,
            inputs: vec!["x1".into(), "x2".into()],
            shrinkage: false,
            deformation_constraints: false,
        }
    }

    pub fn cubic(rank: usize, input: &str) -> Self {
        Self {
            kind: BasisKind::Cubic1d,
            rank,
            inputs: vec![input.into()],
            shrinkage: false,
            deformation_constraints: false,
        }
    }

    pub fn with_shrinkage(mut self, on: bool) -> Self {
        self.shrinkage = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let min = match self.kind {
            BasisKind::ThinPlate2d => 3,
            BasisKind::Cubic1d => 2,
        };
        if self.rank < min {
            return Err(Error::InvalidConfig(format!(
                "{:?} basis needs rank >= {min}, got {}",
                self.kind, self.rank
            )));
        }
        Ok(())
    }
}

/// Centering and common scaling applied to inputs before basis evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Standardizer {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(v, c)| (v - c) / self.scale).collect()
    }
}

/// Everything needed to evaluate basis rows at new inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisEvaluator {
    ThinPlate2d {
        standardizer: Standardizer,
        /// Standardized training locations.
        knots: Vec<[f64; 2]>,
        /// Maps radial evaluations `eta(|x - knot_i|)` to penalized columns.
        radial_map: DMatrix<f64>,
    },
    Cubic1d {
        standardizer: Standardizer,
        knots: Vec<f64>,
        /// Maps knot values to knot second derivatives.
        second_derivative_map: DMatrix<f64>,
    },
}

impl BasisEvaluator {
    pub fn ncols(&self) -> usize {
        match self {
            Self::ThinPlate2d { radial_map, .. } => radial_map.ncols() + 3,
            Self::Cubic1d { knots, .. } => knots.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::ThinPlate2d { .. } => 2,
            Self::Cubic1d { .. } => 1,
        }
    }

    pub fn row(&self, x: &[f64]) -> Result<RowDVector<f64>> {
        if x.len() != self.input_dim() {
            return invalid_input(format!(
                "basis expects {}-dimensional inputs, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid_input("non-finite basis input");
        }
        Ok(match self {
            Self::ThinPlate2d { standardizer, knots, radial_map } => {
                let z = standardizer.apply(x);
                tprs::raw_row(&[z[0], z[1]], knots, radial_map)
            }
            Self::Cubic1d { standardizer, knots, second_derivative_map } => {
                let z = standardizer.apply(x)[0];
                cubic::raw_row(z, knots, second_derivative_map)
            }
        })
    }

    pub fn design_for<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(points.len(), self.ncols());
        for (i, p) in points.iter().enumerate() {
            m.set_row(i, &self.row(p.as_ref())?);
        }
        Ok(m)
    }

    /// Whether a standardized point lies outside the knot range.
    pub fn extrapolates(&self, x: &[f64]) -> bool {
        match self {
            Self::ThinPlate2d { standardizer, knots, .. } => {
                let z = standardizer.apply(x);
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for k in knots {
                    for d in 0..2 {
                        lo[d] = lo[d].min(k[d]);
                        hi[d] = hi[d].max(k[d]);
                    }
                }
                (0..2).any(|d| z[d] < lo[d] - 1e-9 || z[d] > hi[d] + 1e-9)
            }
            Self::Cubic1d { standardizer, knots, .. } => {
                let z = standardizer.apply(x)[0];
                z < knots[0] - 1e-9 || z > knots[knots.len() - 1] + 1e-9
            }
        }
    }
}

/// A basis evaluated at training inputs, with its roughness penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRealization {
    pub kind: BasisKind,
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub null_dim: usize,
    pub evaluator: BasisEvaluator,
}

impl BasisRealization {
    pub fn rank(&self) -> usize {
        self.design.ncols()
    }

    /// Number of leading columns carrying the wiggly part. Thin plate null
    /// space columns `[1, x1, x2]` come last.
    pub fn penalized_cols(&self) -> usize {
        match self.kind {
            BasisKind::ThinPlate2d => self.rank() - 3,
            BasisKind::Cubic1d => self.rank(),
        }
    }

    /// Training-set column means.
    pub fn column_means(&self) -> DVector<f64> {
        let n = self.design.nrows() as f64;
        DVector::from_iterator(self.rank(), self.design.column_iter().map(|c| c.sum() / n))
    }
}

pub(crate) fn count_null(penalty: &DMatrix<f64>) -> usize {
    linalg::log_pdet(penalty).1
}

/// Replace the zero eigenvalues of the penalty so that infinite smoothing
/// shrinks the whole function to zero.
pub fn apply_shrinkage(b: &BasisRealization, factor: f64) -> BasisRealization {
    if b.null_dim == 0 {
        return b.clone();
    }
    let (values, vectors) = linalg::sym_eigen_sorted(&b.penalty);
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = EIGEN_REL_TOL * max;
    let smallest = values.iter().filter(|v| **v > tol && max > 0.0).fold(f64::INFINITY, |a, v| a.min(*v));
    let fill = factor * if smallest.is_finite() { smallest } else { 1.0 };
    let shrunk = DVector::from_iterator(values.len(), values.iter().map(|v| if *v > tol && max > 0.0 { *v } else { fill }));
    let mut penalty = &vectors * DMatrix::from_diagonal(&shrunk) * vectors.transpose();
    linalg::symmetrize(&mut penalty);
    BasisRealization { penalty, null_dim: 0, ..b.clone() }
}

/// One output coordinate of a joint basis: `row(x) = raw(x) * map - offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedOutput {
    pub evaluator: BasisEvaluator,
    pub map: DMatrix<f64>,
    pub offset: RowDVector<f64>,
}

impl MappedOutput {
    pub fn row(&self, x: &[f64]) -> Result<RowDVector<f64>> {
        Ok(self.evaluator.row(x)? * &self.map - &self.offset)
    }
}

/// Several output functions sharing one coefficient vector, with penalty
/// blocks on disjoint coefficient ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointBasis {
    pub outputs: Vec<MappedOutput>,
    pub n_coef: usize,
    pub penalties: Vec<PenaltyBlock>,
    /// Training designs, one `n x n_coef` matrix per output.
    pub designs: Vec<DMatrix<f64>>,
}

impl JointBasis {
    /// Independent outputs stacked block-wise, one penalty block per output.
    pub fn stacked(bases: &[BasisRealization]) -> Self {
        let n_coef: usize = bases.iter().map(|b| b.rank()).sum();
        let mut outputs = Vec::with_capacity(bases.len());
        let mut penalties = Vec::with_capacity(bases.len());
        let mut designs = Vec::with_capacity(bases.len());
        let mut offset = 0;
        for b in bases {
            let k = b.rank();
            let mut map = DMatrix::zeros(k, n_coef);
            map.view_mut((0, offset), (k, k)).fill_with_identity();
            designs.push(&b.design * &map);
            outputs.push(MappedOutput {
                evaluator: b.evaluator.clone(),
                map,
                offset: RowDVector::zeros(n_coef),
            });
            penalties.push(PenaltyBlock { offset, matrix: b.penalty.clone() });
            offset += k;
        }
        Self { outputs, n_coef, penalties, designs }
    }

    /// Thin plate output with its constant column absorbed into a
    /// sum-to-zero constraint over the training points.
    pub fn centered(b: &BasisRealization) -> Result<Self> {
        if b.kind != BasisKind::ThinPlate2d {
            return invalid_input("centering constraint expects a thin plate basis");
        }
        let k = b.rank();
        let m = k - 3;
        let p = k - 1;
        let mut map = DMatrix::zeros(k, p);
        for i in 0..m {
            map[(i, i)] = 1.0;
        }
        map[(m + 1, m)] = 1.0;
        map[(m + 2, m + 1)] = 1.0;
        let offset = b.column_means().transpose() * &map;
        let design = &b.design * &map - DMatrix::from_fn(b.design.nrows(), p, |_, j| offset[j]);
        let penalty = b.penalty.view((0, 0), (m, m)).into_owned();
        Ok(Self {
            outputs: vec![MappedOutput { evaluator: b.evaluator.clone(), map, offset }],
            n_coef: p,
            penalties: vec![PenaltyBlock { offset: 0, matrix: penalty }],
            designs: vec![design],
        })
    }

    /// Place several joint bases side by side on one coefficient vector.
    pub fn concat(parts: &[JointBasis]) -> Self {
        let n_coef: usize = parts.iter().map(|p| p.n_coef).sum();
        let mut out = Self { outputs: Vec::new(), n_coef, penalties: Vec::new(), designs: Vec::new() };
        let mut offset = 0;
        for part in parts {
            let widen = |m: &DMatrix<f64>| {
                let mut w = DMatrix::zeros(m.nrows(), n_coef);
                w.view_mut((0, offset), (m.nrows(), part.n_coef)).copy_from(m);
                w
            };
            for o in &part.outputs {
                let mut shift = RowDVector::zeros(n_coef);
                shift.columns_mut(offset, part.n_coef).copy_from(&o.offset);
                out.outputs.push(MappedOutput { evaluator: o.evaluator.clone(), map: widen(&o.map), offset: shift });
            }
            out.designs.extend(part.designs.iter().map(widen));
            out.penalties.extend(
                part.penalties.iter().map(|b| PenaltyBlock { offset: b.offset + offset, matrix: b.matrix.clone() }),
            );
            offset += part.n_coef;
        }
        out
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Output values at training points for coefficients `beta`.
    pub fn fitted(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.designs.iter().map(|x| x * beta).collect()
    }
}

/// Joint deformation parameterization removing translation of each output
/// and one rotational degree of freedom.
///
/// Each output keeps its wiggly columns, centered so that every output
/// sums to zero over the training points, and the linear parts
/// `g1 ~ b11 x1 + c x2`, `g2 ~ c x1 + b22 x2` share the cross coefficient
/// `c`. A linear map can be made symmetric by a unique proper rotation in
/// a neighbourhood of any nonsingular solution, so the constrained model
/// cannot absorb a small global rotation of D-space. The result has three
/// fewer coefficients than the unconstrained stack and its penalty blocks
/// stay on disjoint coefficient ranges.
pub fn apply_deformation_constraints(
    b1: &BasisRealization,
    b2: &BasisRealization,
) -> Result<JointBasis> {
    if b1.kind != BasisKind::ThinPlate2d || b2.kind != BasisKind::ThinPlate2d {
        return invalid_input("deformation constraints need thin plate bases");
    }
    if b1.design.nrows() != b2.design.nrows() {
        return invalid_input("deformation bases must be built on the same points");
    }
    let tail = |b: &BasisRealization| b.design.columns(b.rank() - 2, 2).into_owned();
    if (tail(b1) - tail(b2)).amax() > 1e-10 {
        return invalid_input("deformation bases must be built on the same points");
    }
    let (m1, m2) = (b1.penalized_cols(), b2.penalized_cols());
    let p = m1 + m2 + 3;
    let (b11, c, b22) = (m1 + m2, m1 + m2 + 1, m1 + m2 + 2);

    let mut map1 = DMatrix::zeros(b1.rank(), p);
    for i in 0..m1 {
        map1[(i, i)] = 1.0;
    }
    map1[(m1 + 1, b11)] = 1.0;
    map1[(m1 + 2, c)] = 1.0;

    let mut map2 = DMatrix::zeros(b2.rank(), p);
    for i in 0..m2 {
        map2[(i, m1 + i)] = 1.0;
    }
    map2[(m2 + 1, c)] = 1.0;
    map2[(m2 + 2, b22)] = 1.0;

    let mut outputs = Vec::with_capacity(2);
    let mut designs = Vec::with_capacity(2);
    for (b, map) in [(b1, map1), (b2, map2)] {
        let offset = b.column_means().transpose() * &map;
        let n = b.design.nrows();
        designs.push(&b.design * &map - DMatrix::from_fn(n, p, |_, j| offset[j]));
        outputs.push(MappedOutput { evaluator: b.evaluator.clone(), map, offset });
    }
    let penalties = vec![
        PenaltyBlock { offset: 0, matrix: b1.penalty.view((0, 0), (m1, m1)).into_owned() },
        PenaltyBlock { offset: m1, matrix: b2.penalty.view((0, 0), (m2, m2)).into_owned() },
    ];
    Ok(JointBasis { outputs, n_coef: p, penalties, designs })
}

/// Penalized least squares `argmin |y - X b|^2 + lambda b'Sb`.
pub fn penalized_lsq(
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    lambda: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let lhs = design.transpose() * design + penalty * lambda;
    let rhs = design.transpose() * y;
    lhs.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| lhs.lu().solve(&rhs))
        .ok_or_else(|| Error::RankDeficient("penalized normal equations are singular".into()))
}
