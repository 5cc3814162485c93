//! Threshold estimation by quantile regression through an asymmetric
//! Laplace likelihood.
//!
//! The check loss is replaced by its log-F smoothing
//! `(1 - p) r - h ln(1 + e^(r / h))`, which tends to the asymmetric Laplace
//! log density as the bandwidth `h` shrinks. The smoothed density is
//! normalized, so the likelihood stays a proper density for AIC.

use nalgebra::{DMatrix, DVector};
use statrs::function::beta::ln_beta;

use super::surface::{Link, Surface, SurfaceBasis, SurfaceSpec};
use super::StationData;
use crate::error::{invalid_config, Error, Result};
use crate::reml::{outer_optimize, OuterOptions, PenalizedModel, PenaltyBlock, RemlFit};

/// Default smoothing bandwidth of the check loss, in units of the ALD scale.
pub const DEFAULT_BANDWIDTH: f64 = 0.5;

/// Stations with fewer observations than this trigger a warning.
pub const MIN_STATION_OBS: usize = 50;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `h ln(1 + e^(r / h))` without overflow.
fn softplus(r: f64, h: f64) -> f64 {
    let x = r / h;
    h * (x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Smoothed asymmetric Laplace log density at `y` with location `u`,
/// log-scale `eta`, asymmetry `p` and bandwidth `h`, with derivatives
/// `[l, l_u, l_eta, l_uu, l_ueta, l_etaeta]`.
pub(crate) fn ald_derivatives(y: f64, u: f64, eta: f64, p: f64, h: f64) -> [f64; 6] {
    let sigma = eta.exp();
    let r = (y - u) / sigma;
    let s = logistic(r / h);
    let a = (1.0 - p) - s;
    let da = -s * (1.0 - s) / h;
    let l = (1.0 - p) * r - softplus(r, h) - eta - h.ln() - ln_beta(h * (1.0 - p), h * p);
    [l, -a / sigma, -a * r - 1.0, da / (sigma * sigma), (da * r + a) / sigma, da * r * r + a * r]
}

struct AldObjective<'a> {
    values: &'a [Vec<f64>],
    p: f64,
    bandwidth: f64,
    x_loc: DMatrix<f64>,
    x_scale: DMatrix<f64>,
    penalties: Vec<PenaltyBlock>,
}

impl AldObjective<'_> {
    fn station_sums(&self, beta: &DVector<f64>) -> Vec<[f64; 6]> {
        let pl = self.x_loc.ncols();
        let u = &self.x_loc * beta.rows(0, pl);
        let eta = &self.x_scale * beta.rows(pl, self.x_scale.ncols());
        self.values
            .iter()
            .enumerate()
            .map(|(s, ys)| {
                let mut acc = [0.0; 6];
                for &y in ys {
                    let d = ald_derivatives(y, u[s], eta[s], self.p, self.bandwidth);
                    for k in 0..6 {
                        acc[k] += d[k];
                    }
                }
                acc
            })
            .collect()
    }
}

impl PenalizedModel for AldObjective<'_> {
    fn n_params(&self) -> usize {
        self.x_loc.ncols() + self.x_scale.ncols()
    }

    fn penalties(&self) -> &[PenaltyBlock] {
        &self.penalties
    }

    fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(self.station_sums(beta).iter().map(|a| a[0]).sum())
    }

    fn gradient(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let sums = self.station_sums(beta);
        let col = |k: usize| DVector::from_iterator(sums.len(), sums.iter().map(|a| a[k]));
        let pl = self.x_loc.ncols();
        let mut g = DVector::zeros(self.n_params());
        g.rows_mut(0, pl).copy_from(&(self.x_loc.transpose() * col(1)));
        g.rows_mut(pl, self.x_scale.ncols()).copy_from(&(self.x_scale.transpose() * col(2)));
        Ok(g)
    }

    fn neg_hessian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sums = self.station_sums(beta);
        let diag = |k: usize| DMatrix::from_diagonal(&DVector::from_iterator(sums.len(), sums.iter().map(|a| -a[k])));
        let (xl, xs) = (&self.x_loc, &self.x_scale);
        let pl = xl.ncols();
        let mut h = DMatrix::zeros(self.n_params(), self.n_params());
        h.view_mut((0, 0), (pl, pl)).copy_from(&(xl.transpose() * diag(3) * xl));
        let cross = xl.transpose() * diag(4) * xs;
        h.view_mut((0, pl), (pl, xs.ncols())).copy_from(&cross);
        h.view_mut((pl, 0), (xs.ncols(), pl)).copy_from(&cross.transpose());
        h.view_mut((pl, pl), (xs.ncols(), xs.ncols())).copy_from(&(xs.transpose() * diag(5) * xs));
        Ok(h)
    }
}

/// Fitted threshold `u(x)` and ALD scale `sigma(x)` surfaces.
#[derive(Debug, Clone)]
pub struct ThresholdFit {
    pub threshold: Surface,
    pub scale: Surface,
    pub fit: RemlFit,
    /// Fraction of training observations above the fitted threshold.
    pub exceedance_rate: f64,
    pub diagnostics: Vec<String>,
}

/// Empirical quantile by linear interpolation of order statistics.
pub fn empirical_quantile(values: &[f64], prob: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = prob.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn fit_ald_threshold(
    data: &StationData,
    zeta: f64,
    location_spec: &SurfaceSpec,
    scale_spec: &SurfaceSpec,
    bandwidth: f64,
    opts: &OuterOptions,
) -> Result<ThresholdFit> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return invalid_config(format!("exceedance probability must lie in (0, 1), got {zeta}"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return invalid_config("check-loss bandwidth must be positive");
    }
    data.validate()?;
    let values = data.station_values();
    let mut diagnostics = Vec::new();
    for (s, ys) in values.iter().enumerate() {
        if ys.iter().all(|y| *y == 0.0) {
            return Err(Error::Data(format!("station {} has only zero (or no) observations", data.station_label(s))));
        }
        if ys.len() < MIN_STATION_OBS {
            let msg = format!("station {} has only {} observations", data.station_label(s), ys.len());
            log::warn!("{msg}");
            diagnostics.push(msg);
        }
    }
    let p = 1.0 - zeta;
    let cov = data.covariate.as_deref();
    let loc_basis = SurfaceBasis::build(location_spec, &data.stations, cov)?;
    let scale_basis = SurfaceBasis::build(scale_spec, &data.stations, cov)?;
    let x_loc = loc_basis.design(&data.stations, cov)?;
    let x_scale = scale_basis.design(&data.stations, cov)?;
    let pl = x_loc.ncols();
    let mut penalties = loc_basis.penalties(0);
    penalties.extend(scale_basis.penalties(pl));
    let obj = AldObjective { values: &values, p, bandwidth, x_loc, x_scale, penalties };

    let pooled: Vec<f64> = values.iter().flatten().copied().collect();
    let u0 = empirical_quantile(&pooled, p);
    let check = pooled.iter().map(|y| {
        let r = y - u0;
        r * (p - if r < 0.0 { 1.0 } else { 0.0 })
    });
    let sigma0 = check.sum::<f64>() / pooled.len() as f64;
    let spread = pooled.iter().fold(0.0f64, |a, y| a.max((y - u0).abs()));
    let mut beta0 = DVector::zeros(obj.n_params());
    beta0[0] = u0;
    beta0[pl] = sigma0.max(1e-6 * spread.max(1e-300)).ln();

    let fit = outer_optimize(&obj, &beta0, opts)?;
    let nl = loc_basis.terms.len();
    let threshold = Surface {
        link: Link::Identity,
        coef: fit.beta.rows(0, pl).into_owned(),
        lambda: fit.lambda[..nl].to_vec(),
        basis: loc_basis,
    };
    let scale = Surface {
        link: Link::Log,
        coef: fit.beta.rows(pl, obj.x_scale.ncols()).into_owned(),
        lambda: fit.lambda[nl..].to_vec(),
        basis: scale_basis,
    };
    let u = &obj.x_loc * &threshold.coef;
    let above: usize = values.iter().enumerate().map(|(s, ys)| ys.iter().filter(|y| **y > u[s]).count()).sum();
    let exceedance_rate = above as f64 / pooled.len() as f64;
    if !fit.converged {
        diagnostics.push("threshold fit did not converge".into());
    }
    Ok(ThresholdFit { threshold, scale, fit, exceedance_rate, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::station_layout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn derivatives_match_finite_differences() {
        let (p, h) = (0.97, 0.5);
        for (y, u, eta) in [(0.3, 1.0, -0.5), (2.5, 1.0, 0.2), (1.01, 1.0, -1.0)] {
            let d = ald_derivatives(y, u, eta, p, h);
            let e = 1e-6;
            let f = |du: f64, de: f64| ald_derivatives(y, u + du, eta + de, p, h);
            let fd = |k: usize, du: f64, de: f64| (f(du, de)[k] - f(-du, -de)[k]) / (2.0 * e);
            for (k, want) in [(1, fd(0, e, 0.0)), (2, fd(0, 0.0, e)), (3, fd(1, e, 0.0)), (4, fd(1, 0.0, e)), (5, fd(2, 0.0, e))] {
                assert!((d[k] - want).abs() < 1e-6 * (1.0 + want.abs()), "k={k}: {} vs {want}", d[k]);
            }
        }
    }

    #[test]
    fn smoothed_density_integrates_to_one() {
        let (p, h) = (0.97, 0.5);
        let n = 400_000;
        let (lo, hi) = (-1500.0, 60.0);
        let dx = (hi - lo) / n as f64;
        let total: f64 = (0..n).map(|i| ald_derivatives(lo + (i as f64 + 0.5) * dx, 0.0, 0.0, p, h)[0].exp() * dx).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn constant_threshold_matches_empirical_quantile() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let stations = station_layout(5, 2);
        let t = 2000;
        let exp = Exp::new(1.0).unwrap();
        let values = DMatrix::from_fn(t, 5, |_, _| if rng.random::<f64>() < 0.4 { 0.0 } else { exp.sample(&mut rng) });
        let data = StationData::new(values, stations, None).unwrap();
        let f = fit_ald_threshold(&data, 0.03, &SurfaceSpec::constant(), &SurfaceSpec::constant(), DEFAULT_BANDWIDTH, &OuterOptions::default()).unwrap();
        let pooled: Vec<f64> = data.values.iter().copied().collect();
        let q = empirical_quantile(&pooled, 0.97);
        // standard error of the sample quantile: sqrt(p (1 - p) / n) / f(q)
        let density = 0.6 * (-q / 1.0f64).exp();
        let se = (0.97 * 0.03 / pooled.len() as f64).sqrt() / density;
        let u = f.threshold.value(&[0.0, 0.0], None).unwrap();
        assert!((u - q).abs() < se, "u={u} q={q} se={se}");
        assert!((f.exceedance_rate - 0.03).abs() <= 0.01);
    }

    #[test]
    fn all_zero_station_is_rejected() {
        let mut values = DMatrix::from_element(60, 4, 1.0);
        values.column_mut(2).fill(0.0);
        let data = StationData::new(values, station_layout(4, 1), None).unwrap();
        let r = fit_ald_threshold(&data, 0.03, &SurfaceSpec::constant(), &SurfaceSpec::constant(), 0.5, &OuterOptions::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
