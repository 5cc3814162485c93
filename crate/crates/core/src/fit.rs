//! Model fitting for the three warp families and the persisted model file.
//!
//! The anisotropic model is fitted first; its scales and covariance
//! parameters seed the deformation and dimension-expansion fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::gplik::{covariance_params, CovarianceParams, FoldSetup, SampleMoments, WarpObjective};
use crate::reml::{outer_optimize, OuterOptions, PenalizedModel, RemlFit};
use crate::tiling::{make_grid_tiling, FoldPenaltyConfig, FoldPenaltyKind, Point2, Rect, Tiling};
use crate::warp::{pairwise_dspace_distances, Family, WarpModel, WarpSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// A fitted warp model as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub library_version: String,
    pub model: WarpModel,
    pub stations: Vec<Point2>,
    pub moments: SampleMoments,
    pub beta: DVector<f64>,
    pub lambda: Vec<f64>,
    /// Negative Hessian of the penalized objective at `beta`.
    pub neg_hessian: DMatrix<f64>,
    pub reml: f64,
    pub loglik: f64,
    pub aic: f64,
    pub edf: f64,
    pub null_dim: usize,
    pub converged: bool,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub fold: Option<FoldSetup>,
    pub diagnostics: Vec<String>,
    /// Options of the run that produced the file, including preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl FitResult {
    fn from_reml(obj: WarpObjective, fit: RemlFit) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            model: obj.model,
            stations: obj.stations,
            moments: obj.moments,
            beta: fit.beta,
            lambda: fit.lambda,
            neg_hessian: fit.neg_hessian,
            reml: fit.reml,
            loglik: fit.loglik,
            aic: fit.aic,
            edf: fit.edf,
            null_dim: fit.null_dim,
            converged: fit.converged,
            inner_iters: fit.inner_iters,
            outer_iters: fit.outer_iters,
            fold: obj.fold,
            diagnostics: fit.diagnostics,
            run_config: None,
        }
    }

    pub fn family(&self) -> Family {
        self.model.spec.family
    }

    pub fn covariance(&self) -> CovarianceParams {
        covariance_params(&self.model, &self.beta)
    }

    /// Coefficients, scales and covariance parameters plus smoothing
    /// parameters.
    pub fn parameter_count(&self) -> usize {
        self.beta.len() + self.lambda.len()
    }

    pub fn warp_points(&self, points: &[Point2]) -> Result<DMatrix<f64>> {
        self.model.warp_points(&self.beta, points)
    }

    /// Warped stations as 2-D points (first two D-space coordinates).
    pub fn warped_plane(&self, points: &[Point2]) -> Result<Vec<Point2>> {
        let z = self.warp_points(points)?;
        Ok((0..z.nrows()).map(|i| [z[(i, 0)], z[(i, 1)]]).collect())
    }

    /// Per-pair empirical and model semivariances at D-space distances.
    pub fn pairwise_semivariances(&self) -> Result<Vec<PairSemivariance>> {
        let z = self.warp_points(&self.stations)?;
        let d = pairwise_dspace_distances(&z);
        let p = self.covariance();
        let v = &self.moments.v;
        let n = self.stations.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let h = d[(i, j)];
                out.push(PairSemivariance {
                    i,
                    j,
                    distance: h,
                    empirical: 0.5 * (v[(i, i)] + v[(j, j)]) - v[(i, j)],
                    model: p.semivariance(h),
                });
            }
        }
        Ok(out)
    }

    /// Root mean squared difference between empirical and model
    /// semivariances over station pairs.
    pub fn semivariogram_rmse(&self) -> Result<f64> {
        let pairs = self.pairwise_semivariances()?;
        let ss: f64 = pairs.iter().map(|p| (p.empirical - p.model).powi(2)).sum();
        Ok((ss / pairs.len().max(1) as f64).sqrt())
    }

    pub fn fold_count(&self) -> Result<Option<usize>> {
        self.fold.as_ref().map(|f| f.fold_count(&self.beta)).transpose()
    }

    /// Rebuild the objective this fit optimized.
    pub fn objective(&self) -> Result<WarpObjective> {
        let obj = WarpObjective::new(self.model.clone(), self.stations.clone(), self.moments.clone())?;
        Ok(match &self.fold {
            Some(f) => obj.with_fold(f.clone()),
            None => obj,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fit: Self = serde_json::from_str(s)?;
        if fit.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "model file has schema version {}, this library reads {SCHEMA_VERSION}",
                fit.schema_version
            )));
        }
        Ok(fit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSemivariance {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub empirical: f64,
    pub model: f64,
}

/// Fold-penalty request for a deformation fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOptions {
    pub kind: FoldPenaltyKind,
    pub delta: f64,
    /// `epsilon = epsilon_frac * A_aniso`, with `A_aniso` the mean cell area
    /// of the tiling warped by the anisotropic fit.
    pub epsilon_frac: f64,
    pub nx: usize,
    pub ny: usize,
    /// Tiling domain; the station bounding box when absent.
    pub domain: Option<Rect>,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self { kind: FoldPenaltyKind::Near, delta: 1e6, epsilon_frac: 0.1, nx: 20, ny: 20, domain: None }
    }
}

/// Tiling used for fold checks when none is configured.
pub fn default_tiling(stations: &[Point2], nx: usize, ny: usize, domain: Option<Rect>) -> Result<Tiling> {
    let rect = match domain {
        Some(r) => r,
        None => Rect::bounding(stations)?,
    };
    make_grid_tiling(rect, nx, ny)
}

fn median_distance(stations: &[Point2]) -> f64 {
    let mut d = Vec::new();
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            let h = ((stations[i][0] - stations[j][0]).powi(2) + (stations[i][1] - stations[j][1]).powi(2)).sqrt();
            if h > 0.0 {
                d.push(h);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn check_data(stations: &[Point2], moments: &SampleMoments) -> Result<()> {
    if stations.len() != moments.n {
        return invalid_input(format!("{} stations but {} data columns", stations.len(), moments.n));
    }
    if stations.len() < 3 {
        return invalid_input("need at least three stations");
    }
    if stations.iter().flatten().any(|c| !c.is_finite()) {
        return invalid_input("station coordinates must be finite");
    }
    Ok(())
}

/// Fit `x* = (x1 / phi1, x2 / phi2)` by maximum likelihood.
pub fn fit_anisotropic(stations: &[Point2], moments: &SampleMoments, opts: &OuterOptions) -> Result<FitResult> {
    check_data(stations, moments)?;
    let model = WarpModel::build(&WarpSpec::anisotropic(), stations)?;
    let obj = WarpObjective::new(model.clone(), stations.to_vec(), moments.clone())?;
    let mean_var = moments.v.diagonal().mean().max(1e-12);
    let base = median_distance(stations);
    let lp = model.layout.log_phi.start;
    let th = model.layout.theta.start;
    // coarse search over the range and nugget share for a start
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mult in [0.25, 0.5, 1.0, 2.0, 4.0] {
        for nugget in [0.05, 0.2, 0.5] {
            let start = CovarianceParams::new(mean_var * (1.0 - nugget), mean_var * nugget, 1.0)?.to_unconstrained();
            let mut b = DVector::zeros(model.n_params());
            b[lp] = (base * mult).ln();
            b[lp + 1] = (base * mult).ln();
            b.rows_mut(th, 3).copy_from_slice(&start);
            if let Ok(l) = obj.loglik(&b) {
                if best.as_ref().is_none_or(|(bl, _)| l > *bl) {
                    best = Some((l, b));
                }
            }
        }
    }
    let (_, beta0) = best.ok_or_else(|| Error::Convergence("no valid anisotropic starting point".into()))?;
    let fit = outer_optimize(&obj, &beta0, opts)?;
    Ok(FitResult::from_reml(obj, fit))
}

fn seed_theta(aniso: &FitResult, model: &WarpModel, beta: &mut DVector<f64>) {
    let from = aniso.model.layout.theta.start;
    let to = model.layout.theta.start;
    for k in 0..3 {
        beta[to + k] = aniso.beta[from + k];
    }
}

fn aniso_scales(aniso: &FitResult) -> Result<(f64, f64)> {
    if aniso.family() != Family::Anisotropic {
        return invalid_config("seed fit must be anisotropic");
    }
    let lp = aniso.model.layout.log_phi.start;
    Ok((aniso.beta[lp].exp(), aniso.beta[lp + 1].exp()))
}

/// Fit a thin plate spatial deformation of rank `rank` per output,
/// optionally with a fold penalty.
pub fn fit_deformation(
    stations: &[Point2],
    moments: &SampleMoments,
    rank: usize,
    aniso: &FitResult,
    fold: Option<&FoldOptions>,
    opts: &OuterOptions,
) -> Result<FitResult> {
    check_data(stations, moments)?;
    let (phi1, phi2) = aniso_scales(aniso)?;
    let model = WarpModel::build(&WarpSpec::deformation(rank), stations)?;
    let mut beta0 = DVector::zeros(model.n_params());
    seed_theta(aniso, &model, &mut beta0);
    // affine start reproducing the anisotropic scaling: the linear columns
    // act on standardized coordinates x~ = (x - c) / s
    let joint = model.joint.as_ref().expect("deformation basis");
    let scale = match &joint.outputs[0].evaluator {
        crate::basis::BasisEvaluator::ThinPlate2d { standardizer, .. } => standardizer.scale,
        _ => 1.0,
    };
    let c = model.layout.coef.end;
    beta0[c - 3] = scale / phi1;
    beta0[c - 1] = scale / phi2;

    let mut obj = WarpObjective::new(model.clone(), stations.to_vec(), moments.clone())?;
    let mut notes = Vec::new();
    if let Some(f) = fold {
        let tiling = default_tiling(stations, f.nx, f.ny, f.domain)?;
        let a_aniso = tiling.areas().iter().sum::<f64>() / tiling.len() as f64 / (phi1 * phi2);
        let epsilon = f.epsilon_frac * a_aniso;
        let cfg = FoldPenaltyConfig::new(f.kind, f.delta, epsilon)?;
        notes.push(format!(
            "fold penalty {:?}: delta={:e} epsilon={:e} (A_aniso={:e}) on {}x{} tiling",
            f.kind, f.delta, epsilon, a_aniso, f.nx, f.ny
        ));
        obj = obj.with_fold(FoldSetup::new(&model, tiling, cfg)?);
    }
    let fit = outer_optimize(&obj, &beta0, opts)?;
    let mut out = FitResult::from_reml(obj, fit);
    out.diagnostics.splice(0..0, notes);
    Ok(out)
}

/// Fit `g(x) = (x / phi, g_1(x), ..., g_r(x))` with shrunk thin plate
/// splines of rank `rank`.
pub fn fit_dimension_expansion(
    stations: &[Point2],
    moments: &SampleMoments,
    r: usize,
    rank: usize,
    aniso: &FitResult,
    opts: &OuterOptions,
) -> Result<FitResult> {
    check_data(stations, moments)?;
    let (phi1, phi2) = aniso_scales(aniso)?;
    let model = WarpModel::build(&WarpSpec::dimension_expansion(r, rank), stations)?;
    let mut beta0 = DVector::zeros(model.n_params());
    seed_theta(aniso, &model, &mut beta0);
    beta0[model.layout.log_phi.start] = 0.5 * (phi1 * phi2).ln();
    // zero added dimensions are a stationary point of the likelihood; start
    // each one slightly tilted so the optimizer can leave it
    for d in 0..r {
        let end = model.layout.coef.start + (d + 1) * rank;
        beta0[end - 2 + (d % 2)] = 0.05;
    }
    let obj = WarpObjective::new(model, stations.to_vec(), moments.clone())?;
    let fit = outer_optimize(&obj, &beta0, opts)?;
    Ok(FitResult::from_reml(obj, fit))
}
