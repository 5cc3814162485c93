//! Marginal extremes (threshold and excess models), the transform to a
//! censored Gaussian scale, and pairwise tail dependence.
//!
//! Fitting runs in stages: the threshold surface first, then the GPD on
//! the excesses above it, then dependence on the transformed data.

pub mod ald;
pub mod dependence;
pub mod gpd;
pub mod normal;
pub mod pit;
pub mod surface;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::fit::SCHEMA_VERSION;
use crate::reml::OuterOptions;
use crate::tiling::Point2;

pub use ald::{fit_ald_threshold, ThresholdFit};
pub use dependence::{censored_pair_loglik, estimate_pairwise_rho, semivariance_estimates, PairwiseCorr, Semivariances};
pub use gpd::{fit_gpd, gpd_cdf, ExcessData, GpdFit};
pub use pit::{censoring_point, inverse_pit, pit_to_gaussian, MarginAt};
pub use surface::{Link, Surface, SurfaceSpec};

/// Station series: a `T x n` table (`NaN` for missing) with locations and
/// an optional per-station covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct StationData {
    pub values: DMatrix<f64>,
    pub stations: Vec<Point2>,
    pub covariate: Option<Vec<f64>>,
    pub ids: Option<Vec<String>>,
}

impl StationData {
    pub fn new(values: DMatrix<f64>, stations: Vec<Point2>, covariate: Option<Vec<f64>>) -> Result<Self> {
        let d = Self { values, stations, covariate, ids: None };
        d.validate()?;
        Ok(d)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.stations.len() {
            return invalid_input("one id per station is required");
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stations.len();
        if self.values.ncols() != n {
            return invalid_input(format!("{} data columns but {n} stations", self.values.ncols()));
        }
        if let Some(c) = &self.covariate {
            if c.len() != n || c.iter().any(|v| !v.is_finite()) {
                return invalid_input("covariate needs one finite value per station");
            }
        }
        if self.values.iter().any(|v| v.is_infinite()) {
            return invalid_input("data contain infinite values");
        }
        Ok(())
    }

    pub fn station_label(&self, s: usize) -> String {
        self.ids.as_ref().map_or_else(|| s.to_string(), |ids| ids[s].clone())
    }

    /// Observed values per station.
    pub fn station_values(&self) -> Vec<Vec<f64>> {
        self.values.column_iter().map(|c| c.iter().copied().filter(|v| v.is_finite()).collect()).collect()
    }

    pub fn covariate_at(&self, s: usize) -> Option<f64> {
        self.covariate.as_ref().map(|c| c[s])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub zeta: f64,
    pub threshold: SurfaceSpec,
    pub ald_scale: SurfaceSpec,
    pub gpd_scale: SurfaceSpec,
    pub gpd_shape: SurfaceSpec,
    /// Check-loss smoothing bandwidth relative to the ALD scale.
    pub bandwidth: f64,
    pub outer: OuterOptions,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            zeta: 0.03,
            threshold: SurfaceSpec::constant(),
            ald_scale: SurfaceSpec::constant(),
            gpd_scale: SurfaceSpec::constant(),
            gpd_shape: SurfaceSpec::constant(),
            bandwidth: ald::DEFAULT_BANDWIDTH,
            outer: OuterOptions::default(),
        }
    }
}

impl MarginalOptions {
    /// Thin plate smooths of the given rank on every surface, with an
    /// optional covariate smooth.
    pub fn spatial(zeta: f64, rank: usize, covariate_rank: Option<usize>) -> Self {
        let spec = SurfaceSpec { spatial_rank: Some(rank), covariate_rank };
        Self { zeta, threshold: spec, ald_scale: spec, gpd_scale: spec, gpd_shape: spec, ..Self::default() }
    }
}

/// Summary of one penalized stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub loglik: f64,
    pub edf: f64,
    pub aic: f64,
    pub reml: f64,
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

impl StageSummary {
    fn from_fit(f: &crate::reml::RemlFit, extra: Vec<String>) -> Self {
        let mut diagnostics = extra;
        diagnostics.extend(f.diagnostics.iter().cloned());
        Self { loglik: f.loglik, edf: f.edf, aic: f.aic, reml: f.reml, converged: f.converged, diagnostics }
    }
}

/// Fitted marginal model, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub schema_version: u32,
    pub library_version: String,
    pub zeta: f64,
    pub bandwidth: f64,
    pub threshold: Surface,
    pub ald_scale: Surface,
    pub gpd_scale: Surface,
    pub gpd_shape: Surface,
    pub stations: Vec<Point2>,
    pub covariate: Option<Vec<f64>>,
    /// Training fraction of observations above the fitted threshold.
    pub exceedance_rate: f64,
    pub n_excesses: usize,
    pub threshold_stage: StageSummary,
    pub gpd_stage: StageSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl MarginalModel {
    pub fn converged(&self) -> bool {
        self.threshold_stage.converged && self.gpd_stage.converged
    }

    pub fn uses_covariate(&self) -> bool {
        [&self.threshold, &self.ald_scale, &self.gpd_scale, &self.gpd_shape].iter().any(|s| s.basis.uses_covariate())
    }

    pub fn at(&self, x: &Point2, covariate: Option<f64>) -> Result<MarginAt> {
        let m = MarginAt {
            zeta: self.zeta,
            threshold: self.threshold.value(x, covariate)?,
            psi: self.gpd_scale.value(x, covariate)?,
            xi: self.gpd_shape.value(x, covariate)?,
        };
        if !(m.psi > 0.0 && m.psi.is_finite() && m.xi.is_finite() && m.threshold.is_finite()) {
            return Err(Error::InvalidInput(format!("marginal parameters invalid at ({}, {})", x[0], x[1])));
        }
        Ok(m)
    }

    pub fn ald_scale_at(&self, x: &Point2, covariate: Option<f64>) -> Result<f64> {
        self.ald_scale.value(x, covariate)
    }

    /// Gaussian-scale values and exceedance flags for station data; missing
    /// values stay `NaN` and are flagged as non-exceedances.
    pub fn to_gaussian(&self, data: &StationData) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
        data.validate()?;
        let (t, n) = data.values.shape();
        let mut z = DMatrix::from_element(t, n, f64::NAN);
        let mut exceed = DMatrix::from_element(t, n, false);
        for s in 0..n {
            let m = self.at(&data.stations[s], data.covariate_at(s))?;
            for r in 0..t {
                let y = data.values[(r, s)];
                if y.is_finite() {
                    z[(r, s)] = pit_to_gaussian(y, &m);
                    exceed[(r, s)] = y > m.threshold;
                }
            }
        }
        Ok((z, exceed))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "marginal file has schema version {}, this library reads {SCHEMA_VERSION}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Threshold by ALD quantile regression, then GPD surfaces on the excesses.
pub fn fit_marginal(data: &StationData, opts: &MarginalOptions) -> Result<MarginalModel> {
    let th = fit_ald_threshold(data, opts.zeta, &opts.threshold, &opts.ald_scale, opts.bandwidth, &opts.outer)?;
    let values = data.station_values();
    let mut excesses = Vec::with_capacity(values.len());
    for (s, ys) in values.iter().enumerate() {
        let u = th.threshold.value(&data.stations[s], data.covariate_at(s))?;
        excesses.push(ys.iter().filter(|y| **y > u).map(|y| y - u).collect::<Vec<_>>());
    }
    let excess_data = ExcessData { stations: data.stations.clone(), covariate: data.covariate.clone(), excesses };
    let gp = fit_gpd(&excess_data, &opts.gpd_scale, &opts.gpd_shape, &opts.outer)?;
    Ok(MarginalModel {
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        zeta: opts.zeta,
        bandwidth: opts.bandwidth,
        threshold_stage: StageSummary::from_fit(&th.fit, th.diagnostics.clone()),
        gpd_stage: StageSummary::from_fit(&gp.fit, Vec::new()),
        threshold: th.threshold,
        ald_scale: th.scale,
        gpd_scale: gp.scale,
        gpd_shape: gp.shape,
        stations: data.stations.clone(),
        covariate: data.covariate.clone(),
        exceedance_rate: th.exceedance_rate,
        n_excesses: excess_data.total(),
        run_config: None,
    })
}
