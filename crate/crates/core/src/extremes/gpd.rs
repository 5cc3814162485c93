//! Generalized Pareto excess model with log-link scale and identity-link
//! shape surfaces.

use nalgebra::{DMatrix, DVector};

use super::surface::{Link, Surface, SurfaceBasis, SurfaceSpec};
use crate::error::{invalid_input, Error, Result};
use crate::reml::{outer_optimize, OuterOptions, PenalizedModel, PenaltyBlock, RemlFit};
use crate::tiling::Point2;

/// Shape values at or below this are rejected: the variance of the
/// excesses does not exist there and the likelihood becomes irregular.
pub const MIN_SHAPE: f64 = -0.5;

/// Below this `|xi y / psi|` the `xi -> 0` expansions are used.
const SERIES_CUTOFF: f64 = 1e-2;

/// `ln(1 + t) / t`, equal to 1 at `t = 0`.
fn log1p_ratio(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        1.0 - t / 2.0 + t * t / 3.0
    } else {
        t.ln_1p() / t
    }
}

/// Survival `1 - F(y; psi, xi)`, zero beyond the upper endpoint.
pub fn gpd_survival(y: f64, psi: f64, xi: f64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    let z = y / psi;
    let t = xi * z;
    if 1.0 + t <= 0.0 {
        return 0.0;
    }
    (-z * log1p_ratio(t)).exp()
}

/// `F(y; psi, xi) = 1 - (1 + xi y / psi)^(-1/xi)`, continuous through `xi = 0`.
pub fn gpd_cdf(y: f64, psi: f64, xi: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let z = y / psi;
    let t = xi * z;
    if 1.0 + t <= 0.0 {
        return 1.0;
    }
    -(-z * log1p_ratio(t)).exp_m1()
}

/// Excess with the given survival probability.
pub fn gpd_excess_from_survival(s: f64, psi: f64, xi: f64) -> f64 {
    let ls = s.ln();
    let a = -xi * ls;
    // (s^-xi - 1) / xi = -ln s * expm1(a) / a
    let ratio = if a.abs() < 1e-10 { 1.0 + a / 2.0 } else { a.exp_m1() / a };
    -psi * ls * ratio
}

/// Upper endpoint of the support, infinite for `xi >= 0`.
pub fn gpd_upper_endpoint(psi: f64, xi: f64) -> f64 {
    if xi < 0.0 {
        -psi / xi
    } else {
        f64::INFINITY
    }
}

pub fn gpd_logpdf(y: f64, psi: f64, xi: f64) -> f64 {
    if y < 0.0 || psi <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = y / psi;
    let t = xi * z;
    if 1.0 + t <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -psi.ln() - t.ln_1p() - z * log1p_ratio(t)
}

/// `[ln(1 + t) - t / (1 + t)] / t^2`.
fn c_term(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        (2..14).rev().fold(0.0, |acc, k| {
            let kf = k as f64;
            let coef = if k % 2 == 0 { 1.0 } else { -1.0 } * (kf - 1.0) / kf;
            acc * t + coef
        })
    } else {
        (t.ln_1p() - t / (1.0 + t)) / (t * t)
    }
}

/// `[t^2 / (1 + t)^2 + 2 t / (1 + t) - 2 ln(1 + t)] / t^3`.
fn d_term(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        (3..15).rev().fold(0.0, |acc, k| {
            let kf = k as f64;
            let coef = if k % 2 == 0 { 1.0 } else { -1.0 } * (kf - 3.0 + 2.0 / kf);
            acc * t + coef
        })
    } else {
        let q = 1.0 + t;
        (t * t / (q * q) + 2.0 * t / q - 2.0 * t.ln_1p()) / (t * t * t)
    }
}

/// Log density and its first and second derivatives in `(ln psi, xi)`:
/// `[l, l_eta, l_xi, l_eta_eta, l_eta_xi, l_xi_xi]`.
pub(crate) fn gpd_derivatives(y: f64, eta: f64, xi: f64) -> Option<[f64; 6]> {
    let z = y * (-eta).exp();
    let t = xi * z;
    let q = 1.0 + t;
    if q <= 0.0 {
        return None;
    }
    let l = -eta - t.ln_1p() - z * log1p_ratio(t);
    let l_eta = -1.0 + (1.0 + xi) * z / q;
    let l_xi = z * z * c_term(t) - z / q;
    let l_ee = -(1.0 + xi) * z / (q * q);
    let l_ex = z * (1.0 - z) / (q * q);
    let l_xx = z * z * z * d_term(t) + z * z / (q * q);
    Some([l, l_eta, l_xi, l_ee, l_ex, l_xx])
}

/// Excesses grouped by station.
#[derive(Debug, Clone)]
pub struct ExcessData {
    pub stations: Vec<Point2>,
    pub covariate: Option<Vec<f64>>,
    pub excesses: Vec<Vec<f64>>,
}

impl ExcessData {
    pub fn total(&self) -> usize {
        self.excesses.iter().map(Vec::len).sum()
    }

    fn pooled(&self) -> Vec<f64> {
        self.excesses.iter().flatten().copied().collect()
    }
}

struct GpdObjective<'a> {
    data: &'a ExcessData,
    x_scale: DMatrix<f64>,
    x_shape: DMatrix<f64>,
    penalties: Vec<PenaltyBlock>,
}

impl GpdObjective<'_> {
    fn split(&self, beta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let ps = self.x_scale.ncols();
        let eta = &self.x_scale * beta.rows(0, ps);
        let xi = &self.x_shape * beta.rows(ps, self.x_shape.ncols());
        (eta, xi)
    }

    /// Per-station sums of the derivative array, or `None` when a shape is
    /// below the guard or an excess is outside the support.
    fn station_sums(&self, beta: &DVector<f64>) -> Option<Vec<[f64; 6]>> {
        let (eta, xi) = self.split(beta);
        let mut out = Vec::with_capacity(eta.len());
        for (s, ys) in self.data.excesses.iter().enumerate() {
            if ys.is_empty() {
                out.push([0.0; 6]);
                continue;
            }
            if xi[s] <= MIN_SHAPE {
                return None;
            }
            let mut acc = [0.0; 6];
            for &y in ys {
                let d = gpd_derivatives(y, eta[s], xi[s])?;
                for k in 0..6 {
                    acc[k] += d[k];
                }
            }
            out.push(acc);
        }
        Some(out)
    }
}

impl PenalizedModel for GpdObjective<'_> {
    fn n_params(&self) -> usize {
        self.x_scale.ncols() + self.x_shape.ncols()
    }

    fn penalties(&self) -> &[PenaltyBlock] {
        &self.penalties
    }

    fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(match self.station_sums(beta) {
            Some(s) => s.iter().map(|a| a[0]).sum(),
            None => f64::NEG_INFINITY,
        })
    }

    fn gradient(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let sums = self.station_sums(beta).ok_or_else(|| Error::InvalidInput("GPD parameters outside the support".into()))?;
        let ge = DVector::from_iterator(sums.len(), sums.iter().map(|a| a[1]));
        let gx = DVector::from_iterator(sums.len(), sums.iter().map(|a| a[2]));
        let mut g = DVector::zeros(self.n_params());
        let ps = self.x_scale.ncols();
        g.rows_mut(0, ps).copy_from(&(self.x_scale.transpose() * ge));
        g.rows_mut(ps, self.x_shape.ncols()).copy_from(&(self.x_shape.transpose() * gx));
        Ok(g)
    }

    fn neg_hessian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sums = self.station_sums(beta).ok_or_else(|| Error::InvalidInput("GPD parameters outside the support".into()))?;
        let diag = |k: usize| DMatrix::from_diagonal(&DVector::from_iterator(sums.len(), sums.iter().map(|a| -a[k])));
        let (xs, xx) = (&self.x_scale, &self.x_shape);
        let ps = xs.ncols();
        let mut h = DMatrix::zeros(self.n_params(), self.n_params());
        h.view_mut((0, 0), (ps, ps)).copy_from(&(xs.transpose() * diag(3) * xs));
        let cross = xs.transpose() * diag(4) * xx;
        h.view_mut((0, ps), (ps, xx.ncols())).copy_from(&cross);
        h.view_mut((ps, 0), (xx.ncols(), ps)).copy_from(&cross.transpose());
        h.view_mut((ps, ps), (xx.ncols(), xx.ncols())).copy_from(&(xx.transpose() * diag(5) * xx));
        Ok(h)
    }
}

/// Fitted scale and shape surfaces with the REML summary.
#[derive(Debug, Clone)]
pub struct GpdFit {
    pub scale: Surface,
    pub shape: Surface,
    pub fit: RemlFit,
}

/// Pooled method-of-moments start, pulled inside the support.
fn moment_start(pooled: &[f64]) -> (f64, f64) {
    let n = pooled.len() as f64;
    let m = pooled.iter().sum::<f64>() / n;
    let v = pooled.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n;
    let ratio = if v > 0.0 { m * m / v } else { 1.0 };
    let mut xi = (0.5 * (1.0 - ratio)).clamp(MIN_SHAPE + 0.1, 0.9);
    let mut psi = 0.5 * m * (1.0 + ratio);
    let ymax = pooled.iter().fold(0.0f64, |a, b| a.max(*b));
    if xi < 0.0 && ymax >= 0.9 * gpd_upper_endpoint(psi, xi) {
        xi = 0.0;
        psi = m;
    }
    (psi.max(1e-12), xi)
}

pub fn fit_gpd(data: &ExcessData, scale_spec: &SurfaceSpec, shape_spec: &SurfaceSpec, opts: &OuterOptions) -> Result<GpdFit> {
    if data.excesses.len() != data.stations.len() {
        return invalid_input("one excess list per station is required");
    }
    let pooled = data.pooled();
    if pooled.len() < 2 {
        return invalid_input("need at least two excesses");
    }
    if pooled.iter().any(|y| !(y.is_finite() && *y > 0.0)) {
        return invalid_input("excesses must be finite and strictly positive");
    }
    let cov = data.covariate.as_deref();
    let scale_basis = SurfaceBasis::build(scale_spec, &data.stations, cov)?;
    let shape_basis = SurfaceBasis::build(shape_spec, &data.stations, cov)?;
    let x_scale = scale_basis.design(&data.stations, cov)?;
    let x_shape = shape_basis.design(&data.stations, cov)?;
    let ps = x_scale.ncols();
    let mut penalties = scale_basis.penalties(0);
    penalties.extend(shape_basis.penalties(ps));
    let obj = GpdObjective { data, x_scale, x_shape, penalties };

    let (psi0, xi0) = moment_start(&pooled);
    let mut beta0 = DVector::zeros(obj.n_params());
    beta0[0] = psi0.ln();
    beta0[ps] = xi0;
    if !obj.loglik(&beta0)?.is_finite() {
        beta0[ps] = 0.0;
        beta0[0] = (pooled.iter().sum::<f64>() / pooled.len() as f64).ln();
    }
    let fit = outer_optimize(&obj, &beta0, opts)?;
    let nl_scale = scale_basis.terms.len();
    let scale = Surface {
        link: Link::Log,
        coef: fit.beta.rows(0, ps).into_owned(),
        lambda: fit.lambda[..nl_scale].to_vec(),
        basis: scale_basis,
    };
    let shape = Surface {
        link: Link::Identity,
        coef: fit.beta.rows(ps, obj.x_shape.ncols()).into_owned(),
        lambda: fit.lambda[nl_scale..].to_vec(),
        basis: shape_basis,
    };
    Ok(GpdFit { scale, shape, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn draw(n: usize, psi: f64, xi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| gpd_excess_from_survival(1.0 - rng.random::<f64>(), psi, xi)).collect()
    }

    #[test]
    fn cdf_limits_and_monotonicity() {
        assert_eq!(gpd_cdf(0.0, 1.0, 0.3), 0.0);
        for y in [0.01, 0.5, 2.0, 10.0] {
            let exp = 1.0 - (-y / 1.5f64).exp();
            assert!((gpd_cdf(y, 1.5, 1e-8) - exp).abs() < 1e-6);
            assert!((gpd_cdf(y, 1.5, 0.0) - exp).abs() < 1e-15);
        }
        let mut prev = 0.0;
        for i in 1..200 {
            let f = gpd_cdf(i as f64 * 0.05, 1.0, -0.2);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(gpd_cdf(6.0, 1.0, -0.2), 1.0);
    }

    #[test]
    fn survival_inverse_round_trips() {
        for xi in [-0.4, -1e-9, 0.0, 1e-9, 0.2, 0.8] {
            for y in [1e-6, 0.3, 1.7, 4.0] {
                if y >= gpd_upper_endpoint(2.0, xi) {
                    continue;
                }
                let s = gpd_survival(y, 2.0, xi);
                assert!((gpd_excess_from_survival(s, 2.0, xi) - y).abs() < 1e-12 * (1.0 + y), "{xi} {y}");
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for xi in [-0.3, -1e-6, 0.0, 1e-5, 0.25] {
            for y in [0.05, 1.0, 3.0] {
                let eta = 0.3;
                let d = gpd_derivatives(y, eta, xi).unwrap();
                assert!((d[0] - gpd_logpdf(y, eta.exp(), xi)).abs() < 1e-12);
                let h = 1e-5;
                let f = |e: f64, x: f64| gpd_derivatives(y, e, x).unwrap();
                let fd = |k: usize, de: f64, dx: f64| (f(eta + de, xi + dx)[k] - f(eta - de, xi - dx)[k]) / (2.0 * h);
                let pairs = [(1, fd(0, h, 0.0)), (2, fd(0, 0.0, h)), (3, fd(1, h, 0.0)), (4, fd(1, 0.0, h)), (5, fd(2, 0.0, h))];
                for (k, want) in pairs {
                    assert!((d[k] - want).abs() < 1e-6 * (1.0 + want.abs()), "xi={xi} y={y} k={k}: {} vs {want}", d[k]);
                }
            }
        }
    }

    #[test]
    fn constant_fit_recovers_parameters() {
        let ys = draw(10_000, 1.0, 0.2, 3);
        let data = ExcessData { stations: vec![[0.0, 0.0]], covariate: None, excesses: vec![ys] };
        let f = fit_gpd(&data, &SurfaceSpec::constant(), &SurfaceSpec::constant(), &OuterOptions::default()).unwrap();
        let psi = f.scale.value(&[0.0, 0.0], None).unwrap();
        let xi = f.shape.value(&[0.0, 0.0], None).unwrap();
        assert!(f.fit.converged);
        assert!((psi - 1.0).abs() < 0.1 && (xi - 0.2).abs() < 0.1, "psi={psi} xi={xi}");
    }

    #[test]
    fn rejects_non_positive_excesses() {
        let data = ExcessData { stations: vec![[0.0, 0.0]], covariate: None, excesses: vec![vec![1.0, 0.0, 2.0]] };
        assert!(fit_gpd(&data, &SurfaceSpec::constant(), &SurfaceSpec::constant(), &OuterOptions::default()).is_err());
    }
}
