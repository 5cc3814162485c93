//! Fixed-smoothing-parameter uncertainty: the coefficient distribution
//! `MVN(beta_hat, H^-1)` and standard errors of warped coordinates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::linalg;
use crate::tiling::Point2;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// True when `H` was not positive definite and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

impl CoefficientDistribution {
    /// Invert a negative Hessian by Cholesky, falling back to an eigenvalue
    /// pseudo-inverse when it is not positive definite.
    pub fn new(mean: DVector<f64>, neg_hessian: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if neg_hessian.nrows() != p || neg_hessian.ncols() != p {
            return Err(Error::InvalidInput(format!(
                "Hessian is {}x{} but there are {p} coefficients",
                neg_hessian.nrows(),
                neg_hessian.ncols()
            )));
        }
        if neg_hessian.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("Hessian has non-finite entries; check that the fit converged".into()));
        }
        let (covariance, pseudo_inverse) = linalg::spd_inverse(neg_hessian);
        if pseudo_inverse {
            if covariance.iter().all(|v| *v == 0.0) && p > 0 {
                return Err(Error::NotPositiveDefinite(
                    "Hessian has no positive curvature; check that the fit converged".into(),
                ));
            }
            log::warn!("negative Hessian is not positive definite; using its pseudo-inverse");
        }
        Ok(Self { mean, covariance, pseudo_inverse })
    }

    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        Self::new(fit.beta.clone(), &fit.neg_hessian)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt(j' Cov j)`.
    pub fn standard_error(&self, direction: &DVector<f64>) -> f64 {
        (direction.transpose() * &self.covariance * direction)[0].max(0.0).sqrt()
    }

    /// Factor `L` with `L L' = Cov`, from the eigendecomposition so that a
    /// semi-definite covariance works.
    fn root(&self) -> DMatrix<f64> {
        if let Some(c) = self.covariance.clone().cholesky() {
            return c.l();
        }
        let (vals, vecs) = linalg::sym_eigen_sorted(&self.covariance);
        let roots = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
        vecs * DMatrix::from_diagonal(&roots)
    }

    /// `count` draws, reproducible for a fixed `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        if count == 0 {
            return Vec::new();
        }
        let root = self.root();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = self.dim();
        (0..count)
            .map(|_| {
                let z = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
                &self.mean + &root * z
            })
            .collect()
    }
}

pub fn sample_coefficients(fit: &FitResult, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    Ok(CoefficientDistribution::from_fit(fit)?.sample(count, seed))
}

/// Marginal standard error of each warped coordinate at each point
/// (`points.len() x output_dim`). Coordinates divided by a range parameter
/// use the delta method through `log phi`.
pub fn dspace_standard_errors(fit: &FitResult, points: &[Point2]) -> Result<DMatrix<f64>> {
    let dist = CoefficientDistribution::from_fit(fit)?;
    let q = fit.model.output_dim();
    let mut out = DMatrix::zeros(points.len(), q);
    for (i, p) in points.iter().enumerate() {
        let jac = fit.model.jacobian_at(&fit.beta, p)?;
        for d in 0..q {
            out[(i, d)] = dist.standard_error(&jac.row(d).transpose());
        }
    }
    Ok(out)
}

/// One row of a gridded standard-error map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardErrorRow {
    pub x1: f64,
    pub x2: f64,
    pub dim: usize,
    pub se: f64,
}

pub fn standard_error_rows(fit: &FitResult, points: &[Point2]) -> Result<Vec<StandardErrorRow>> {
    let se = dspace_standard_errors(fit, points)?;
    let mut rows = Vec::with_capacity(se.len());
    for (i, p) in points.iter().enumerate() {
        for d in 0..se.ncols() {
            rows.push(StandardErrorRow { x1: p[0], x2: p[1], dim: d, se: se[(i, d)] });
        }
    }
    Ok(rows)
}
