//! Tail Gaussian dependence: censored pairwise likelihood, pairwise
//! correlation estimates and semivariance summaries.

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal::{bvn_cdf, bvn_pdf, norm_cdf, norm_pdf};
use crate::error::{invalid_input, Error, Result};

/// Search interval for pairwise correlations.
pub const RHO_BOUND: f64 = 0.999;

/// Pairs with fewer jointly observed rows trigger a warning.
pub const MIN_JOINT_ROWS: usize = 30;

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return invalid_input(format!("correlation must lie in (-1, 1), got {rho}"));
    }
    Ok(())
}

/// Log density contribution of one time point and its derivative in `rho`.
/// A flag of `false` means the value is censored at `z`.
fn pair_term(zi: f64, zj: f64, ei: bool, ej: bool, rho: f64) -> (f64, f64) {
    let s2 = 1.0 - rho * rho;
    match (ei, ej) {
        (false, false) => {
            let p = bvn_cdf(zi, zj, rho);
            (p.ln(), bvn_pdf(zi, zj, rho) / p)
        }
        (true, true) => {
            let q = zi * zi - 2.0 * rho * zi * zj + zj * zj;
            let l = -(2.0 * std::f64::consts::PI).ln() - 0.5 * s2.ln() - q / (2.0 * s2);
            let d = rho / s2 + zi * zj / s2 - rho * q / (s2 * s2);
            (l, d)
        }
        // censored value `a`, observed value `b`
        (false, true) | (true, false) => {
            let (a, b) = if ei { (zj, zi) } else { (zi, zj) };
            let s = s2.sqrt();
            let w = (a - rho * b) / s;
            let cdf = norm_cdf(w);
            let dw = (rho * a - b) / (s2 * s);
            (cdf.ln() + norm_pdf(b).ln(), norm_pdf(w) / cdf * dw)
        }
    }
}

fn joint_rows<'a>(zi: &'a [f64], zj: &'a [f64]) -> impl Iterator<Item = usize> + 'a {
    (0..zi.len()).filter(move |&t| zi[t].is_finite() && zj[t].is_finite())
}

fn check_lengths(zi: &[f64], zj: &[f64], ei: &[bool], ej: &[bool]) -> Result<()> {
    let n = zi.len();
    if zj.len() != n || ei.len() != n || ej.len() != n {
        return invalid_input("pair series and flags must have equal lengths");
    }
    Ok(())
}

/// Censored bivariate Gaussian log-likelihood over the rows where both
/// series are observed (non-finite `z` marks a missing value).
pub fn censored_pair_loglik(zi: &[f64], zj: &[f64], ei: &[bool], ej: &[bool], rho: f64) -> Result<f64> {
    Ok(censored_pair_loglik_with_derivative(zi, zj, ei, ej, rho)?.0)
}

/// Log-likelihood and its derivative with respect to `rho`.
pub fn censored_pair_loglik_with_derivative(zi: &[f64], zj: &[f64], ei: &[bool], ej: &[bool], rho: f64) -> Result<(f64, f64)> {
    check_rho(rho)?;
    check_lengths(zi, zj, ei, ej)?;
    Ok(joint_rows(zi, zj).fold((0.0, 0.0), |(l, d), t| {
        let (a, b) = pair_term(zi[t], zj[t], ei[t], ej[t], rho);
        (l + a, d + b)
    }))
}

struct NegPairLoglik<'a> {
    zi: &'a [f64],
    zj: &'a [f64],
    ei: &'a [bool],
    ej: &'a [bool],
}

impl CostFunction for NegPairLoglik<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, rho: &f64) -> std::result::Result<f64, argmin::core::Error> {
        let l = censored_pair_loglik(self.zi, self.zj, self.ei, self.ej, *rho).map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        Ok(-l)
    }
}

/// One pairwise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub rho: f64,
    pub loglik: f64,
    pub joint_rows: usize,
    pub joint_exceedances: usize,
    /// The maximum sits at the edge of the search interval.
    pub at_boundary: bool,
    /// Observed information `-d2 l / d rho2` at the estimate.
    pub information: f64,
}

/// `-d2 l / d rho2` by central differences of the analytic derivative.
pub fn pair_information(zi: &[f64], zj: &[f64], ei: &[bool], ej: &[bool], rho: f64) -> Result<f64> {
    let h = 1e-5;
    let (lo, hi) = ((rho - h).max(-RHO_BOUND), (rho + h).min(RHO_BOUND));
    let (_, d_hi) = censored_pair_loglik_with_derivative(zi, zj, ei, ej, hi)?;
    let (_, d_lo) = censored_pair_loglik_with_derivative(zi, zj, ei, ej, lo)?;
    Ok(-(d_hi - d_lo) / (hi - lo))
}

/// Number of fully observed bivariate Gaussian rows carrying the same
/// information about `rho` as `information`.
pub fn equivalent_rows(information: f64, rho: f64) -> f64 {
    information * (1.0 - rho * rho).powi(2) / (1.0 + rho * rho)
}

/// Maximize the censored pair likelihood over `(-0.999, 0.999)`: a coarse
/// grid locates the basin, Brent's method refines it.
pub fn estimate_pair(zi: &[f64], zj: &[f64], ei: &[bool], ej: &[bool]) -> Result<PairEstimate> {
    check_lengths(zi, zj, ei, ej)?;
    let rows: Vec<usize> = joint_rows(zi, zj).collect();
    if rows.is_empty() {
        return Err(Error::Data("pair has no jointly observed rows".into()));
    }
    let joint_exceedances = rows.iter().filter(|&&t| ei[t] && ej[t]).count();
    let f = |rho: f64| censored_pair_loglik(zi, zj, ei, ej, rho);
    let steps = 40;
    let grid: Vec<f64> = (0..=steps).map(|k| -RHO_BOUND + 2.0 * RHO_BOUND * k as f64 / steps as f64).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &r) in grid.iter().enumerate() {
        let l = f(r)?;
        if l > best.1 {
            best = (k, l);
        }
    }
    let lo = grid[best.0.saturating_sub(1)];
    let hi = grid[(best.0 + 1).min(steps)];
    let solver = BrentOpt::new(lo, hi).set_tolerance(1e-10, 1e-10);
    let problem = NegPairLoglik { zi, zj, ei, ej };
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(200))
        .run()
        .map_err(|e| Error::Convergence(format!("pairwise correlation search failed: {e}")))?;
    let state = res.state();
    let (mut rho, mut loglik) = match state.best_param {
        Some(r) => (r, -state.best_cost),
        None => (grid[best.0], best.1),
    };
    if best.1 > loglik {
        rho = grid[best.0];
        loglik = best.1;
    }
    let at_boundary = RHO_BOUND - rho.abs() < 1e-3;
    let information = pair_information(zi, zj, ei, ej, rho)?;
    Ok(PairEstimate { rho, loglik, joint_rows: rows.len(), joint_exceedances, at_boundary, information })
}

/// Assembled pairwise correlation estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCorr {
    pub rho: DMatrix<f64>,
    /// Jointly observed rows per pair; the diagonal holds per-station counts.
    pub counts: DMatrix<usize>,
    pub joint_exceedances: DMatrix<usize>,
    /// Pairs whose estimate sits on the search boundary.
    pub boundary: Vec<(usize, usize)>,
    /// Equivalent fully observed rows per pair (see [`equivalent_rows`]).
    pub equivalent_rows: DMatrix<f64>,
    pub diagnostics: Vec<String>,
}

impl PairwiseCorr {
    /// Median over pairs of the equivalent fully observed rows: the sample
    /// size at which a Gaussian sample correlation would be as precise as
    /// the censored estimates. Boundary pairs are skipped.
    pub fn effective_sample_size(&self) -> Option<f64> {
        let n = self.rho.nrows();
        let mut v: Vec<f64> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|p| !self.boundary.contains(p))
            .map(|(i, j)| self.equivalent_rows[(i, j)])
            .filter(|t| t.is_finite() && *t > 0.0)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

/// Estimate every pairwise correlation from `T x n` Gaussian-scale values
/// (non-finite for missing) and exceedance flags.
pub fn estimate_pairwise_rho(z: &DMatrix<f64>, exceed: &DMatrix<bool>) -> Result<PairwiseCorr> {
    let (t, n) = z.shape();
    if exceed.shape() != (t, n) {
        return invalid_input("values and exceedance flags must have the same shape");
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| z.column(j).iter().copied().collect()).collect();
    let flags: Vec<Vec<bool>> = (0..n).map(|j| exceed.column(j).iter().copied().collect()).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let estimates: Vec<Result<PairEstimate>> =
        pairs.par_iter().map(|&(i, j)| estimate_pair(&cols[i], &cols[j], &flags[i], &flags[j])).collect();

    let mut rho = DMatrix::identity(n, n);
    let mut counts = DMatrix::zeros(n, n);
    let mut joint_exceedances = DMatrix::zeros(n, n);
    let mut boundary = Vec::new();
    let mut equiv = DMatrix::zeros(n, n);
    let mut diagnostics = Vec::new();
    for j in 0..n {
        counts[(j, j)] = cols[j].iter().filter(|v| v.is_finite()).count();
        joint_exceedances[(j, j)] = (0..t).filter(|&r| flags[j][r] && cols[j][r].is_finite()).count();
    }
    for (&(i, j), est) in pairs.iter().zip(estimates) {
        let e = est.map_err(|e| Error::Data(format!("pair ({i}, {j}): {e}")))?;
        rho[(i, j)] = e.rho;
        rho[(j, i)] = e.rho;
        counts[(i, j)] = e.joint_rows;
        counts[(j, i)] = e.joint_rows;
        joint_exceedances[(i, j)] = e.joint_exceedances;
        joint_exceedances[(j, i)] = e.joint_exceedances;
        equiv[(i, j)] = equivalent_rows(e.information, e.rho);
        equiv[(j, i)] = equiv[(i, j)];
        if e.joint_rows < MIN_JOINT_ROWS {
            let msg = format!("pair ({i}, {j}) has only {} jointly observed rows", e.joint_rows);
            log::warn!("{msg}");
            diagnostics.push(msg);
        }
        if e.at_boundary {
            log::warn!("pair ({i}, {j}) correlation estimate {} is on the search boundary", e.rho);
            boundary.push((i, j));
        }
    }
    Ok(PairwiseCorr { rho, counts, joint_exceedances, boundary, equivalent_rows: equiv, diagnostics })
}

/// Semivariance of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGamma {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub gamma: f64,
}

/// Average semivariance over one distance bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_distance: f64,
    pub gamma: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semivariances {
    pub pairs: Vec<PairGamma>,
    pub bins: Vec<GammaBin>,
}

pub const DEFAULT_BINS: usize = 15;

/// `gamma_ij = (V_ii + V_jj) / 2 - V_ij` against the distances between
/// rows of `coords`, plus equal-width distance bins (empty bins omitted).
pub fn semivariance_estimates(v: &DMatrix<f64>, coords: &DMatrix<f64>, bins: usize) -> Result<Semivariances> {
    let n = v.nrows();
    if v.ncols() != n || coords.nrows() != n {
        return invalid_input("semivariance input must be square with one coordinate row per site");
    }
    if (v - v.transpose()).amax() > 1e-10 * v.amax().max(1.0) {
        return invalid_input("semivariance input must be symmetric");
    }
    if bins == 0 {
        return invalid_input("need at least one bin");
    }
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let distance = (coords.row(i) - coords.row(j)).norm();
            pairs.push(PairGamma { i, j, distance, gamma: 0.5 * (v[(i, i)] + v[(j, j)]) - v[(i, j)] });
        }
    }
    let dmax = pairs.iter().fold(0.0f64, |a, p| a.max(p.distance));
    let width = if dmax > 0.0 { dmax / bins as f64 } else { 1.0 };
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for p in &pairs {
        let b = ((p.distance / width) as usize).min(bins - 1);
        acc[b].0 += p.distance;
        acc[b].1 += p.gamma;
        acc[b].2 += 1;
    }
    let bins = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(b, a)| GammaBin {
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            mean_distance: a.0 / a.2 as f64,
            gamma: a.1 / a.2 as f64,
            count: a.2,
        })
        .collect();
    Ok(Semivariances { pairs, bins })
}
