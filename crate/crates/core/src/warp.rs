//! G-space to D-space mappings for the anisotropic, deformation and
//! dimension-expansion families.
//!
//! Every family is linear in its basis coefficients. Scale parameters enter
//! on the log scale as `x * exp(-log_phi)`. The full parameter vector is
//! laid out as `[basis coefficients | log-phi entries | covariance params]`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{
    apply_deformation_constraints, apply_shrinkage, build_tprs, BasisKind, BasisSpec, JointBasis,
    DEFAULT_SHRINKAGE_FACTOR,
};
use crate::error::{invalid_config, invalid_input, Result};
use crate::reml::PenaltyBlock;
use crate::tiling::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Anisotropic,
    Deformation,
    DimensionExpansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub family: Family,
    /// One basis per output function `g_d`.
    pub bases: Vec<BasisSpec>,
}

impl WarpSpec {
    pub fn anisotropic() -> Self {
        Self { family: Family::Anisotropic, bases: Vec::new() }
    }

    pub fn deformation(rank: usize) -> Self {
        let mut b = BasisSpec::thin_plate(rank);
        b.deformation_constraints = true;
        Self { family: Family::Deformation, bases: vec![b.clone(), b] }
    }

    /// `r` added dimensions, each a shrunk thin plate regression spline.
    pub fn dimension_expansion(r: usize, rank: usize) -> Self {
        let b = BasisSpec::thin_plate(rank).with_shrinkage(true);
        Self { family: Family::DimensionExpansion, bases: vec![b; r] }
    }

    pub fn added_dims(&self) -> usize {
        match self.family {
            Family::DimensionExpansion => self.bases.len(),
            _ => 0,
        }
    }

    /// Dimension of D-space.
    pub fn output_dim(&self) -> usize {
        2 + self.added_dims()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.bases {
            b.validate()?;
            if b.kind != BasisKind::ThinPlate2d {
                return invalid_config("warp functions use thin plate bases");
            }
        }
        match self.family {
            Family::Anisotropic if !self.bases.is_empty() => {
                invalid_config("the anisotropic family has no basis functions")
            }
            Family::Deformation if self.bases.len() != 2 => {
                invalid_config("a deformation needs exactly two output bases")
            }
            Family::DimensionExpansion if self.bases.is_empty() => {
                invalid_config("dimension expansion needs r >= 1 added dimensions")
            }
            _ => Ok(()),
        }
    }
}

/// Index ranges of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub coef: Range<usize>,
    pub log_phi: Range<usize>,
    pub theta: Range<usize>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.theta.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A warp family realized on a set of station locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpModel {
    pub spec: WarpSpec,
    pub joint: Option<JointBasis>,
    pub layout: ParamLayout,
}

impl WarpModel {
    pub fn build(spec: &WarpSpec, stations: &[Point2]) -> Result<Self> {
        spec.validate()?;
        let joint = match spec.family {
            Family::Anisotropic => None,
            Family::Deformation => {
                let b1 = build_tprs(stations, spec.bases[0].rank)?;
                let b2 = build_tprs(stations, spec.bases[1].rank)?;
                Some(apply_deformation_constraints(&b1, &b2)?)
            }
            Family::DimensionExpansion => {
                let mut parts = Vec::with_capacity(spec.bases.len());
                for b in &spec.bases {
                    let raw = build_tprs(stations, b.rank)?;
                    parts.push(if b.shrinkage {
                        JointBasis::stacked(&[apply_shrinkage(&raw, DEFAULT_SHRINKAGE_FACTOR)])
                    } else {
                        JointBasis::centered(&raw)?
                    });
                }
                Some(JointBasis::concat(&parts))
            }
        };
        let n_coef = joint.as_ref().map_or(0, |j| j.n_coef);
        let n_phi = match spec.family {
            Family::Anisotropic => 2,
            Family::Deformation => 0,
            Family::DimensionExpansion => 1,
        };
        let layout = ParamLayout {
            coef: 0..n_coef,
            log_phi: n_coef..n_coef + n_phi,
            theta: n_coef + n_phi..n_coef + n_phi + 3,
        };
        Ok(Self { spec: spec.clone(), joint, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Penalty blocks positioned in the full parameter vector.
    pub fn penalties(&self) -> Vec<PenaltyBlock> {
        self.joint.as_ref().map_or_else(Vec::new, |j| j.penalties.clone())
    }

    /// D-space coordinates of each point, one row per point.
    pub fn warp_points(&self, beta: &DVector<f64>, points: &[Point2]) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let q = self.output_dim();
        let mut out = DMatrix::zeros(points.len(), q);
        let mut warned = false;
        for (i, p) in points.iter().enumerate() {
            let z = self.warp_one(beta, p)?;
            out.set_row(i, &z.transpose());
            if !warned && self.extrapolates(p) {
                log::warn!("warping point ({}, {}) outside the station range", p[0], p[1]);
                warned = true;
            }
        }
        Ok(out)
    }

    fn extrapolates(&self, p: &Point2) -> bool {
        self.joint.as_ref().is_some_and(|j| j.outputs.iter().any(|o| o.evaluator.extrapolates(p)))
    }

    fn warp_one(&self, beta: &DVector<f64>, p: &Point2) -> Result<DVector<f64>> {
        let coef = beta.rows(self.layout.coef.start, self.layout.coef.len());
        let q = self.output_dim();
        let mut z = DVector::zeros(q);
        match self.spec.family {
            Family::Anisotropic => {
                let lp = self.layout.log_phi.start;
                z[0] = p[0] * (-beta[lp]).exp();
                z[1] = p[1] * (-beta[lp + 1]).exp();
            }
            Family::Deformation => {
                let joint = self.joint.as_ref().expect("deformation has a basis");
                for (d, out) in joint.outputs.iter().enumerate() {
                    z[d] = (out.row(p)? * coef)[0];
                }
            }
            Family::DimensionExpansion => {
                let joint = self.joint.as_ref().expect("dimension expansion has a basis");
                let inv_phi = (-beta[self.layout.log_phi.start]).exp();
                z[0] = p[0] * inv_phi;
                z[1] = p[1] * inv_phi;
                for (d, out) in joint.outputs.iter().enumerate() {
                    z[2 + d] = (out.row(p)? * coef)[0];
                }
            }
        }
        Ok(z)
    }

    /// Derivative of each D-coordinate of one point with respect to the full
    /// parameter vector (`q x n_params`).
    pub fn jacobian_at(&self, beta: &DVector<f64>, p: &Point2) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        let q = self.output_dim();
        let mut jac = DMatrix::zeros(q, self.n_params());
        let lp = self.layout.log_phi.start;
        match self.spec.family {
            Family::Anisotropic => {
                jac[(0, lp)] = -p[0] * (-beta[lp]).exp();
                jac[(1, lp + 1)] = -p[1] * (-beta[lp + 1]).exp();
            }
            Family::Deformation | Family::DimensionExpansion => {
                let joint = self.joint.as_ref().expect("basis present");
                let first = if self.spec.family == Family::Deformation {
                    0
                } else {
                    let inv_phi = (-beta[lp]).exp();
                    jac[(0, lp)] = -p[0] * inv_phi;
                    jac[(1, lp)] = -p[1] * inv_phi;
                    2
                };
                for (d, out) in joint.outputs.iter().enumerate() {
                    let row = out.row(p)?;
                    jac.view_mut((first + d, self.layout.coef.start), (1, row.len())).copy_from(&row);
                }
            }
        }
        Ok(jac)
    }

    /// Jacobians for a batch of points.
    pub fn warp_jacobian(&self, beta: &DVector<f64>, points: &[Point2]) -> Result<Vec<DMatrix<f64>>> {
        points.iter().map(|p| self.jacobian_at(beta, p)).collect()
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.n_params() {
            return invalid_input(format!(
                "parameter vector has length {}, model expects {}",
                beta.len(),
                self.n_params()
            ));
        }
        Ok(())
    }
}

/// Euclidean D-space distances between all pairs of warped points.
pub fn pairwise_dspace_distances(coords: &DMatrix<f64>) -> DMatrix<f64> {
    let n = coords.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let h = (coords.row(i) - coords.row(j)).norm();
            d[(i, j)] = h;
            d[(j, i)] = h;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stations(n: usize, seed: u64) -> Vec<Point2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..1.5)]).collect()
    }

    #[test]
    fn anisotropic_unit_scales_is_identity() {
        let m = WarpModel::build(&WarpSpec::anisotropic(), &stations(5, 1)).unwrap();
        assert_eq!(m.n_params(), 5);
        let beta = DVector::zeros(5);
        let pts = [[0.3, -1.2], [4.0, 2.0]];
        let z = m.warp_points(&beta, &pts).unwrap();
        assert_eq!(z[(0, 0)], 0.3);
        assert_eq!(z[(1, 1)], 2.0);
    }

    #[test]
    fn unit_square_distances() {
        let m = WarpModel::build(&WarpSpec::anisotropic(), &stations(5, 1)).unwrap();
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let d = pairwise_dspace_distances(&m.warp_points(&DVector::zeros(5), &pts).unwrap());
        assert_eq!(d[(0, 1)], 1.0);
        assert_eq!(d[(0, 2)], 1.0);
        assert!((d[(0, 3)] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn deformation_null_space_coefficients_give_an_affine_map() {
        let pts = stations(20, 2);
        let m = WarpModel::build(&WarpSpec::deformation(8), &pts).unwrap();
        let mut beta = DVector::zeros(m.n_params());
        let c = m.layout.coef.end;
        beta[c - 3] = 1.7;
        beta[c - 2] = -0.4;
        beta[c - 1] = 0.9;
        let probe: Vec<Point2> = stations(10, 3);
        let z = m.warp_points(&beta, &probe).unwrap();
        // affine: exact fit by [1, x, y]
        let a = DMatrix::from_fn(10, 3, |i, j| [1.0, probe[i][0], probe[i][1]][j]);
        for d in 0..2 {
            let y = z.column(d).into_owned();
            let coef = crate::basis::penalized_lsq(&a, &DMatrix::zeros(3, 3), 0.0, &y).unwrap();
            assert!((&a * coef - y).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_added_dimensions_collapse_to_isotropic() {
        let pts = stations(20, 4);
        let m = WarpModel::build(&WarpSpec::dimension_expansion(2, 6), &pts).unwrap();
        let mut beta = DVector::zeros(m.n_params());
        beta[m.layout.log_phi.start] = 0.5f64.ln();
        let z = m.warp_points(&beta, &pts).unwrap();
        let dz = pairwise_dspace_distances(&z);
        let ident = WarpModel::build(&WarpSpec::anisotropic(), &pts).unwrap();
        let dg = pairwise_dspace_distances(&ident.warp_points(&DVector::zeros(5), &pts).unwrap());
        assert!((dz - dg * 2.0).amax() < 1e-12);
    }

    #[test]
    fn dimension_expansion_parameter_counts() {
        let pts = stations(30, 5);
        let one = WarpModel::build(&WarpSpec::dimension_expansion(1, 12), &pts).unwrap();
        let two = WarpModel::build(&WarpSpec::dimension_expansion(2, 12), &pts).unwrap();
        assert_eq!(two.n_params() - one.n_params(), 12);
        assert_eq!(two.penalties().len() - one.penalties().len(), 1);
    }

    #[test]
    fn spec_validation() {
        let mut s = WarpSpec::deformation(8);
        s.bases.pop();
        assert!(s.validate().is_err());
        assert!(WarpSpec::dimension_expansion(0, 8).validate().is_err());
        assert!(WarpSpec::dimension_expansion(1, 2).validate().is_err());
    }
}
