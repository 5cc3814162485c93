//! Powered-exponential covariance on warped coordinates and the Gaussian
//! process likelihood
//!
//! `l = -((T-1)/2) log|2 pi Sigma| - (T/2) tr(Sigma^-1 V)`
//!
//! with analytic gradients through the warp.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::linalg;
use crate::reml::{self, Kink, PenalizedModel, PenaltyBlock};
use crate::tiling::{clockwise_area_gradient, fold_penalty_area_hessian, fold_penalty_term, FoldPenaltyConfig, FoldPenaltyKind, Point2, Tiling};
use crate::warp::{Family, WarpModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma2: f64,
    pub tau2: f64,
    pub alpha: f64,
}

impl CovarianceParams {
    pub fn new(sigma2: f64, tau2: f64, alpha: f64) -> Result<Self> {
        let p = Self { sigma2, tau2, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return invalid_input("sigma2 must be positive");
        }
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return invalid_input("tau2 must be non-negative");
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return invalid_input("alpha must lie in (0, 2]");
        }
        Ok(())
    }

    /// `(ln sigma2, ln tau2, a)` with `alpha = 2 / (1 + exp(-a))`.
    pub fn from_unconstrained(theta: &[f64]) -> Self {
        Self { sigma2: theta[0].exp(), tau2: theta[1].exp(), alpha: 2.0 / (1.0 + (-theta[2]).exp()) }
    }

    /// Inverse of [`Self::from_unconstrained`]. A zero nugget maps to a very
    /// negative log value and `alpha = 2` is pulled just inside the range.
    pub fn to_unconstrained(&self) -> [f64; 3] {
        let a = (self.alpha / 2.0).clamp(1e-12, 1.0 - 1e-12);
        [self.sigma2.ln(), self.tau2.max(1e-300).ln(), (a / (1.0 - a)).ln()]
    }

    /// `d alpha / d a` at this parameter value.
    pub fn alpha_slope(&self) -> f64 {
        self.alpha * (1.0 - self.alpha / 2.0)
    }

    pub fn covariance(&self, h: f64) -> Result<f64> {
        powered_exponential(h, self)
    }

    #[inline]
    fn covariance_unchecked(&self, h: f64) -> f64 {
        if h == 0.0 {
            self.sigma2 + self.tau2
        } else {
            self.sigma2 * (-h.powf(self.alpha)).exp()
        }
    }

    /// Model semivariance `sigma2 + tau2 - C(h)`.
    pub fn semivariance(&self, h: f64) -> f64 {
        self.sigma2 + self.tau2 - self.covariance_unchecked(h)
    }
}

/// `sigma2 + tau2` at zero distance, `sigma2 exp(-h^alpha)` otherwise.
pub fn powered_exponential(h: f64, p: &CovarianceParams) -> Result<f64> {
    if !(h >= 0.0) {
        return invalid_input(format!("distance must be non-negative, got {h}"));
    }
    Ok(p.covariance_unchecked(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub v: DMatrix<f64>,
    pub t: usize,
    pub n: usize,
    pub mu_hat: DVector<f64>,
}

impl SampleMoments {
    /// Moments from a `T x n` table with `NaN` marking missing values.
    /// Each station is centred on its own mean and each covariance uses the
    /// rows where both stations are observed.
    pub fn from_observations(y: &DMatrix<f64>) -> Result<Self> {
        let (t, n) = y.shape();
        if t < 2 || n < 1 {
            return invalid_input("need at least two time points and one station");
        }
        let mut mu = DVector::zeros(n);
        for j in 0..n {
            let (s, c) = y.column(j).iter().filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if c < 2 {
                return Err(Error::Data(format!("station {j} has fewer than two observations")));
            }
            mu[j] = s / c as f64;
        }
        let mut v = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                let mut c = 0usize;
                for r in 0..t {
                    let (a, b) = (y[(r, i)], y[(r, j)]);
                    if a.is_finite() && b.is_finite() {
                        s += (a - mu[i]) * (b - mu[j]);
                        c += 1;
                    }
                }
                if c == 0 {
                    return Err(Error::Data(format!("stations {i} and {j} share no observed rows")));
                }
                v[(i, j)] = s / c as f64;
                v[(j, i)] = v[(i, j)];
            }
        }
        Ok(Self { v, t, n, mu_hat: mu })
    }

    /// Moments from an already-estimated covariance (or correlation) matrix.
    pub fn from_covariance(v: DMatrix<f64>, t: usize) -> Result<Self> {
        let n = v.nrows();
        if v.ncols() != n {
            return invalid_input("covariance matrix must be square");
        }
        if t < 2 {
            return invalid_input("need T >= 2");
        }
        if (&v - v.transpose()).amax() > 1e-10 * v.amax().max(1.0) {
            return invalid_input("covariance matrix must be symmetric");
        }
        Ok(Self { v, t, n, mu_hat: DVector::zeros(n) })
    }
}

/// `Sigma_ij = C(|z_i - z_j|)` for warped coordinates given row-wise.
pub fn sigma_from_coords(coords: &DMatrix<f64>, p: &CovarianceParams) -> DMatrix<f64> {
    let n = coords.nrows();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = p.sigma2 + p.tau2;
        for j in (i + 1)..n {
            let h = (coords.row(i) - coords.row(j)).norm();
            let c = p.covariance_unchecked(h);
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    s
}

/// Covariance matrix at `points` for the warp and covariance parameters
/// carried in `beta`.
pub fn assemble_sigma(model: &WarpModel, beta: &DVector<f64>, points: &[Point2]) -> Result<DMatrix<f64>> {
    if points.len() < 2 {
        return invalid_input("need at least two locations");
    }
    let p = covariance_params(model, beta);
    p.validate()?;
    let z = model.warp_points(beta, points)?;
    Ok(sigma_from_coords(&z, &p))
}

pub fn covariance_params(model: &WarpModel, beta: &DVector<f64>) -> CovarianceParams {
    let th = &model.layout.theta;
    CovarianceParams::from_unconstrained(&beta.as_slice()[th.start..th.end])
}

pub fn gp_loglik(sigma: &DMatrix<f64>, moments: &SampleMoments) -> Result<f64> {
    Ok(loglik_parts(sigma, moments, false)?.0)
}

/// Log-likelihood and `G = dl/dSigma` treating the entries as free:
/// `G = -((T-1)/2) Sigma^-1 + (T/2) Sigma^-1 V Sigma^-1`.
pub fn gp_loglik_with_sigma_gradient(sigma: &DMatrix<f64>, moments: &SampleMoments) -> Result<(f64, DMatrix<f64>)> {
    let (l, g) = loglik_parts(sigma, moments, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn loglik_parts(sigma: &DMatrix<f64>, m: &SampleMoments, want_grad: bool) -> Result<(f64, Option<DMatrix<f64>>)> {
    let n = sigma.nrows();
    if n != m.n || sigma.ncols() != n || m.v.nrows() != n {
        return invalid_input("covariance and sample moments disagree in size");
    }
    let (chol, _) = linalg::cholesky_with_jitter(sigma)?;
    let t = m.t as f64;
    let logdet = linalg::chol_logdet(&chol) + n as f64 * (2.0 * std::f64::consts::PI).ln();
    let sv = chol.solve(&m.v);
    let l = -0.5 * (t - 1.0) * logdet - 0.5 * t * sv.trace();
    if !l.is_finite() {
        return Err(Error::NotPositiveDefinite("non-finite likelihood".into()));
    }
    if !want_grad {
        return Ok((l, None));
    }
    let inv = chol.inverse();
    let mut g = &inv * (-0.5 * (t - 1.0)) + (&sv * &inv) * (0.5 * t);
    linalg::symmetrize(&mut g);
    Ok((l, Some(g)))
}

/// Fold penalty on a tiling warped by a deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSetup {
    pub tiling: Tiling,
    pub config: FoldPenaltyConfig,
    /// Rows of the deformation basis at the tiling vertices, one matrix per
    /// output coordinate.
    rows: [DMatrix<f64>; 2],
}

impl FoldSetup {
    pub fn new(model: &WarpModel, tiling: Tiling, config: FoldPenaltyConfig) -> Result<Self> {
        if model.spec.family != Family::Deformation {
            return Err(Error::Contract("fold penalties apply to deformation models only".into()));
        }
        config.validate()?;
        let joint = model.joint.as_ref().expect("deformation has a basis");
        let p = model.n_params();
        let mut rows = [DMatrix::zeros(tiling.vertices.len(), p), DMatrix::zeros(tiling.vertices.len(), p)];
        for (d, out) in joint.outputs.iter().enumerate() {
            for (i, v) in tiling.vertices.iter().enumerate() {
                let r = out.row(v)?;
                rows[d].view_mut((i, model.layout.coef.start), (1, r.len())).copy_from(&r);
            }
        }
        Ok(Self { tiling, config, rows })
    }

    pub fn warped_vertices(&self, beta: &DVector<f64>) -> Vec<Point2> {
        let x = &self.rows[0] * beta;
        let y = &self.rows[1] * beta;
        x.iter().zip(y.iter()).map(|(a, b)| [*a, *b]).collect()
    }

    pub fn areas(&self, beta: &DVector<f64>) -> Result<Vec<f64>> {
        self.tiling.warped_areas(&self.warped_vertices(beta))
    }

    pub fn fold_count(&self, beta: &DVector<f64>) -> Result<usize> {
        Ok(self.areas(beta)?.iter().filter(|a| **a < 0.0).count())
    }

    pub fn value(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(fold_penalty_term(&self.config, &self.areas(beta)?)?.value)
    }

    /// Gradient of `delta * h` with respect to `beta`.
    pub fn gradient(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let verts = self.warped_vertices(beta);
        let areas = self.tiling.warped_areas(&verts)?;
        let term = fold_penalty_term(&self.config, &areas)?;
        let nv = verts.len();
        let mut gx = DVector::zeros(nv);
        let mut gy = DVector::zeros(nv);
        for (tri, w) in self.tiling.triangles.iter().zip(term.gradient.iter()) {
            if *w == 0.0 {
                continue;
            }
            let v = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
            let da = clockwise_area_gradient(&v);
            for k in 0..3 {
                gx[tri[k]] += w * da[k][0];
                gy[tri[k]] += w * da[k][1];
            }
        }
        Ok(self.rows[0].transpose() * gx + self.rows[1].transpose() * gy)
    }

    /// Gradient of triangle `l`'s warped area with respect to `beta`.
    fn area_gradient(&self, verts: &[Point2], l: usize) -> DVector<f64> {
        let tri = self.tiling.triangles[l];
        let v = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
        let da = clockwise_area_gradient(&v);
        let mut g = DVector::zeros(self.rows[0].ncols());
        for k in 0..3 {
            g += self.rows[0].row(tri[k]).transpose() * da[k][0] + self.rows[1].row(tri[k]).transpose() * da[k][1];
        }
        g
    }

    /// Triangles whose area is within `band * epsilon` of `epsilon`, where
    /// the gradient of `-delta * h` jumps.
    pub fn kinks(&self, beta: &DVector<f64>, band: f64) -> Result<Vec<Kink>> {
        let eps = self.config.epsilon;
        let verts = self.warped_vertices(beta);
        let areas = self.tiling.warped_areas(&verts)?;
        let jump = match self.config.kind {
            FoldPenaltyKind::Strict => return Ok(Vec::new()),
            FoldPenaltyKind::Near => {
                let shortfall: f64 = areas.iter().map(|w| (eps - w).max(0.0)).sum();
                // zero when no other triangle is below epsilon
                self.config.delta * 2.0 * (shortfall / eps).ln_1p() / (eps + shortfall) * eps
            }
            FoldPenaltyKind::InverseArea => self.config.delta / eps,
        };
        if jump <= 0.0 {
            return Ok(Vec::new());
        }
        Ok((0..areas.len())
            .filter(|&l| (areas[l] / eps - 1.0).abs() <= band)
            .map(|l| Kink { value: areas[l] / eps - 1.0, normal: self.area_gradient(&verts, l) / eps, jump })
            .collect())
    }

    /// Hessian of `delta * h` with respect to `beta`, exact on each side of
    /// the `w = epsilon` kinks.
    pub fn hessian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = beta.len();
        let verts = self.warped_vertices(beta);
        let areas = self.tiling.warped_areas(&verts)?;
        let term = fold_penalty_term(&self.config, &areas)?;
        let (active, curv) = fold_penalty_area_hessian(&self.config, &areas)?;
        let nv = verts.len();
        // area curvature: A is bilinear in (x, y) vertex coordinates
        const PAIRS: [(usize, usize, f64); 6] =
            [(1, 0, 0.5), (2, 1, 0.5), (0, 2, 0.5), (0, 1, -0.5), (1, 2, -0.5), (2, 0, -0.5)];
        let mut w = DMatrix::zeros(nv, nv);
        let mut grads = DMatrix::zeros(active.len(), p);
        for (row, &l) in active.iter().enumerate() {
            let tri = self.tiling.triangles[l];
            let gl = term.gradient[l];
            for (a, b, c) in PAIRS {
                w[(tri[a], tri[b])] += gl * c;
            }
            let v = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
            let da = clockwise_area_gradient(&v);
            let mut g = grads.row_mut(row);
            for k in 0..3 {
                g += self.rows[0].row(tri[k]) * da[k][0] + self.rows[1].row(tri[k]) * da[k][1];
            }
        }
        let cross = self.rows[0].transpose() * w * &self.rows[1];
        let mut h = &cross + cross.transpose();
        if !active.is_empty() {
            h += grads.transpose() * curv * &grads;
        }
        Ok(h)
    }
}

/// Penalized GP objective for one warp family on one data set.
#[derive(Debug, Clone)]
pub struct WarpObjective {
    pub model: WarpModel,
    pub stations: Vec<Point2>,
    pub moments: SampleMoments,
    pub fold: Option<FoldSetup>,
    penalties: Vec<PenaltyBlock>,
}

impl WarpObjective {
    pub fn new(model: WarpModel, stations: Vec<Point2>, moments: SampleMoments) -> Result<Self> {
        if stations.len() != moments.n {
            return invalid_input(format!("{} stations but moments for {}", stations.len(), moments.n));
        }
        if stations.len() < 2 {
            return invalid_input("need at least two stations");
        }
        let penalties = model.penalties();
        Ok(Self { model, stations, moments, fold: None, penalties })
    }

    pub fn with_fold(mut self, fold: FoldSetup) -> Self {
        self.fold = Some(fold);
        self
    }

    pub fn sigma(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        assemble_sigma(&self.model, beta, &self.stations)
    }

    fn check(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.model.n_params() {
            return invalid_input("parameter vector has the wrong length");
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return invalid_input("parameter vector has non-finite entries");
        }
        Ok(())
    }

    /// Gradient of the unpenalized log-likelihood.
    pub fn loglik_gradient(&self, beta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check(beta)?;
        let p = covariance_params(&self.model, beta);
        let z = self.model.warp_points(beta, &self.stations)?;
        let sigma = sigma_from_coords(&z, &p);
        let (l, g) = gp_loglik_with_sigma_gradient(&sigma, &self.moments)?;
        let n = self.stations.len();
        let q = z.ncols();
        let mut grad = DVector::zeros(self.model.n_params());
        let th = self.model.layout.theta.start;
        let slope = p.alpha_slope();
        let mut dz = DMatrix::zeros(n, q);
        let mut d_sigma2 = 0.0;
        let mut d_alpha = 0.0;
        let mut d_tau2 = p.tau2 * g.trace();
        for i in 0..n {
            d_sigma2 += g[(i, i)] * p.sigma2;
            for j in (i + 1)..n {
                let diff = z.row(i) - z.row(j);
                let h = diff.norm();
                if h == 0.0 {
                    d_sigma2 += 2.0 * g[(i, j)] * p.sigma2;
                    d_tau2 += 2.0 * g[(i, j)] * p.tau2;
                    continue;
                }
                let ha = h.powf(p.alpha);
                let c = p.sigma2 * (-ha).exp();
                let w = 2.0 * g[(i, j)];
                d_sigma2 += w * c;
                d_alpha += w * (-c * ha * h.ln());
                // dC/dh / h
                let radial = w * (-c * p.alpha * ha / h) / h;
                for k in 0..q {
                    dz[(i, k)] += radial * diff[k];
                    dz[(j, k)] -= radial * diff[k];
                }
            }
        }
        grad[th] = d_sigma2;
        grad[th + 1] = d_tau2;
        grad[th + 2] = d_alpha * slope;
        for (i, s) in self.stations.iter().enumerate() {
            let jac = self.model.jacobian_at(beta, s)?;
            grad += jac.transpose() * dz.row(i).transpose();
        }
        Ok((l, grad))
    }
}

impl PenalizedModel for WarpObjective {
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn penalties(&self) -> &[PenaltyBlock] {
        &self.penalties
    }

    fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        self.check(beta)?;
        gp_loglik(&self.sigma(beta)?, &self.moments)
    }

    fn extra_penalty(&self, beta: &DVector<f64>) -> Result<f64> {
        match &self.fold {
            Some(f) => f.value(beta),
            None => Ok(0.0),
        }
    }

    fn gradient(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let (_, mut g) = self.loglik_gradient(beta)?;
        if let Some(f) = &self.fold {
            g -= f.gradient(beta)?;
        }
        Ok(g)
    }

    fn neg_hessian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = reml::fd_neg_hessian_of(|b| Ok(self.loglik_gradient(b)?.1), beta)?;
        if let Some(f) = &self.fold {
            h += f.hessian(beta)?;
        }
        Ok(h)
    }

    fn soft_directions(&self) -> usize {
        // the likelihood is invariant under orthogonal maps of the added
        // dimensions: r sign flips and r(r-1)/2 rotations
        match self.model.spec.family {
            Family::DimensionExpansion => {
                let r = self.model.spec.added_dims();
                r + r * (r - 1) / 2
            }
            _ => 0,
        }
    }

    fn kinks(&self, beta: &DVector<f64>, band: f64) -> Result<Vec<Kink>> {
        match &self.fold {
            Some(f) => f.kinks(beta, band),
            None => Ok(Vec::new()),
        }
    }

    fn differentiable(&self) -> bool {
        self.fold.as_ref().is_none_or(|f| f.config.is_differentiable())
    }
}

/// `l(beta) - beta' S_lambda beta / 2`.
pub fn penalized_loglik_p0(obj: &WarpObjective, beta: &DVector<f64>, lambda: &[f64]) -> Result<f64> {
    Ok(obj.loglik(beta)? - 0.5 * reml::penalty_quadratic(obj.penalties(), lambda, beta)?)
}

/// `l_p0 - delta h(areas)`; requires a deformation objective with a fold
/// penalty attached.
pub fn penalized_loglik_p1(obj: &WarpObjective, beta: &DVector<f64>, lambda: &[f64]) -> Result<f64> {
    let Some(fold) = &obj.fold else {
        return Err(Error::Contract("no fold penalty configured for this objective".into()));
    };
    Ok(penalized_loglik_p0(obj, beta, lambda)? - fold.value(beta)?)
}

/// Gradient and negative Hessian of the full penalized objective.
pub fn objective_gradient_hessian<M: PenalizedModel + ?Sized>(
    obj: &M,
    beta: &DVector<f64>,
    lambda: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !obj.differentiable() {
        return Err(Error::NonDifferentiable("objective is not differentiable (strict fold penalty)".into()));
    }
    let s = reml::penalty_matrix(obj.penalties(), lambda, obj.n_params())?;
    let g = obj.gradient(beta)? - &s * beta;
    let h = obj.neg_hessian(beta)? + s;
    Ok((g, h))
}
