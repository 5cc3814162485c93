//! Simulation of extreme-event fields: Gaussian draws on the fitted warped
//! covariance, back-transformation to the data scale, and event losses.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::extremes::{inverse_pit, MarginAt, MarginalModel};
use crate::fit::FitResult;
use crate::gplik::sigma_from_coords;
use crate::linalg;
use crate::tiling::{Point2, Rect};

/// Largest grid factorized densely unless configured otherwise.
pub const DEFAULT_MAX_POINTS: usize = 10_000;

/// Days from 1 April to 31 October.
pub const DEFAULT_DAYS_PER_YEAR: usize = 214;

const KM_PER_DEGREE: f64 = 111.32;

/// Equirectangular area in km² of a `dlon x dlat` degree cell centred at
/// latitude `lat`.
pub fn cell_area_km2(dlon: f64, dlat: f64, lat: f64) -> f64 {
    (dlat * KM_PER_DEGREE) * (dlon * KM_PER_DEGREE * lat.to_radians().cos())
}

/// Simulation cells: centres (lon, lat), areas in km² and an optional
/// covariate per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub points: Vec<Point2>,
    pub areas: Vec<f64>,
    pub covariate: Option<Vec<f64>>,
}

impl SimGrid {
    /// `nx x ny` equal cells covering `rect`, centres in row-major order
    /// (longitude fastest).
    pub fn regular(rect: Rect, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return invalid_config("simulation grid needs at least one cell per axis");
        }
        let dlon = (rect.xmax - rect.xmin) / nx as f64;
        let dlat = (rect.ymax - rect.ymin) / ny as f64;
        if !(dlon > 0.0 && dlat > 0.0) {
            return invalid_config("simulation grid needs a non-degenerate rectangle");
        }
        let mut points = Vec::with_capacity(nx * ny);
        let mut areas = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            let lat = rect.ymin + (j as f64 + 0.5) * dlat;
            for i in 0..nx {
                points.push([rect.xmin + (i as f64 + 0.5) * dlon, lat]);
                areas.push(cell_area_km2(dlon, dlat, lat));
            }
        }
        Ok(Self { points, areas, covariate: None })
    }

    pub fn new(points: Vec<Point2>, areas: Vec<f64>, covariate: Option<Vec<f64>>) -> Result<Self> {
        if points.len() != areas.len() {
            return invalid_input("one area per cell is required");
        }
        if areas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return invalid_input("cell areas must be positive");
        }
        if covariate.as_ref().is_some_and(|c| c.len() != points.len()) {
            return invalid_input("one covariate value per cell is required");
        }
        Ok(Self { points, areas, covariate })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Marginal parameters at every cell.
    pub fn margins(&self, marginal: &MarginalModel) -> Result<Vec<MarginAt>> {
        if marginal.uses_covariate() && self.covariate.is_none() {
            return invalid_input("the marginal model uses a covariate; the grid must supply one per cell");
        }
        (0..self.len()).map(|i| marginal.at(&self.points[i], self.covariate.as_ref().map(|c| c[i]))).collect()
    }
}

/// The fitted covariance on the warped grid, rescaled to unit diagonal.
pub fn correlation_on_grid(fit: &FitResult, points: &[Point2]) -> Result<DMatrix<f64>> {
    let p = fit.covariance();
    p.validate()?;
    let z = fit.warp_points(points)?;
    Ok(sigma_from_coords(&z, &p) / (p.sigma2 + p.tau2))
}

/// Lower-triangular factor of the grid correlation, shared by all draws.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    factor: DMatrix<f64>,
    pub jittered: bool,
}

impl FieldSampler {
    pub fn new(fit: &FitResult, points: &[Point2], max_points: usize) -> Result<Self> {
        if points.len() > max_points {
            return Err(Error::InvalidConfig(format!(
                "grid has {} points, above the dense-factorization limit of {max_points}; use a coarser grid",
                points.len()
            )));
        }
        if points.is_empty() {
            return invalid_input("simulation grid is empty");
        }
        let corr = correlation_on_grid(fit, points)?;
        Self::from_correlation(&corr)
    }

    pub fn from_correlation(corr: &DMatrix<f64>) -> Result<Self> {
        let (chol, jittered) = linalg::cholesky_with_jitter(corr)?;
        Ok(Self { factor: chol.l(), jittered })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Draw `index` of the stream for `seed`; each event has its own
    /// ChaCha stream so draws do not depend on scheduling.
    pub fn draw(&self, seed: u64, index: u64) -> DVector<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
        &self.factor * e
    }

    pub fn draws(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        (0..count as u64).into_par_iter().map(|k| self.draw(seed, k)).collect()
    }
}

/// `count` unit-Gaussian fields at `points`, deterministic per seed.
pub fn simulate_gaussian_fields(fit: &FitResult, points: &[Point2], count: usize, seed: u64, max_points: usize) -> Result<Vec<DVector<f64>>> {
    Ok(FieldSampler::new(fit, points, max_points)?.draws(count, seed))
}

/// Data-scale values; `None` marks censored cells (at or below the
/// censoring point).
pub fn fields_to_rainfall(field: &DVector<f64>, margins: &[MarginAt]) -> Result<Vec<Option<f64>>> {
    if field.len() != margins.len() {
        return invalid_input("one marginal per cell is required");
    }
    Ok(field
        .iter()
        .zip(margins)
        .map(|(&z, m)| if z > crate::extremes::censoring_point(m.zeta) { inverse_pit(z, m) } else { None })
        .collect())
}

/// Sum of threshold excesses weighted by cell area, per km² of the whole
/// domain.
pub fn event_loss(values: &[Option<f64>], margins: &[MarginAt], areas: &[f64]) -> Result<f64> {
    if values.len() != margins.len() || values.len() != areas.len() {
        return invalid_input("values, marginals and areas must have equal lengths");
    }
    if areas.iter().any(|a| !(*a > 0.0)) {
        return invalid_input("cell areas must be positive");
    }
    let total: f64 = areas.iter().sum();
    let weighted: f64 = values
        .iter()
        .zip(margins)
        .zip(areas)
        .filter_map(|((v, m), a)| v.map(|y| (y - m.threshold).max(0.0) * a))
        .sum();
    Ok(weighted / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: usize,
    pub z: Vec<f64>,
    pub y: Vec<Option<f64>>,
    pub loss: f64,
}

impl Event {
    pub fn exceeding_cells(&self) -> usize {
        self.y.iter().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCatalog {
    pub seed: u64,
    pub grid: SimGrid,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub count: usize,
    pub seed: u64,
    pub max_points: usize,
}

impl SimOptions {
    /// Daily events for `years` seasons of `days_per_year` days.
    pub fn years(years: usize, days_per_year: usize, seed: u64) -> Self {
        Self { count: years * days_per_year, seed, max_points: DEFAULT_MAX_POINTS }
    }
}

pub fn simulate_catalog(fit: &FitResult, marginal: &MarginalModel, grid: &SimGrid, opts: &SimOptions) -> Result<EventCatalog> {
    let margins = grid.margins(marginal)?;
    let sampler = FieldSampler::new(fit, &grid.points, opts.max_points)?;
    let events = (0..opts.count)
        .into_par_iter()
        .map(|k| {
            let z = sampler.draw(opts.seed, k as u64);
            let y = fields_to_rainfall(&z, &margins)?;
            let loss = event_loss(&y, &margins, &grid.areas)?;
            Ok(Event { index: k, z: z.iter().copied().collect(), y, loss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EventCatalog { seed: opts.seed, grid: grid.clone(), events })
}

/// Events in descending loss order, ties broken by event index.
pub fn rank_events(catalog: &EventCatalog, top_k: usize) -> Vec<&Event> {
    let mut order: Vec<&Event> = catalog.events.iter().collect();
    order.sort_by(|a, b| b.loss.total_cmp(&a.loss).then(a.index.cmp(&b.index)));
    order.truncate(top_k);
    order
}

impl EventCatalog {
    /// Long format: `event,lon,lat,z,y,censored` with `y` empty when
    /// censored.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["event", "lon", "lat", "z", "y", "censored"])?;
        for e in &self.events {
            write_event_rows(&mut w, e, &self.grid)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One event in the long format.
    pub fn write_event_csv<W: Write>(&self, event: &Event, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["event", "lon", "lat", "z", "y", "censored"])?;
        write_event_rows(&mut w, event, &self.grid)?;
        w.flush()?;
        Ok(())
    }

    /// `event,loss,exceeding_cells`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["event", "loss", "exceeding_cells"])?;
        for e in &self.events {
            w.write_record([e.index.to_string(), e.loss.to_string(), e.exceeding_cells().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_event_rows<W: Write>(w: &mut csv::Writer<W>, e: &Event, grid: &SimGrid) -> Result<()> {
    for (c, p) in grid.points.iter().enumerate() {
        let (y, censored) = match e.y[c] {
            Some(v) => (v.to_string(), "0"),
            None => (String::new(), "1"),
        };
        w.write_record([e.index.to_string(), p[0].to_string(), p[1].to_string(), e.z[c].to_string(), y, censored.to_string()])?;
    }
    Ok(())
}
