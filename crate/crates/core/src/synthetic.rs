//! Synthetic station networks and warped Gaussian-process data for tests,
//! examples and demonstrations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::gplik::CovarianceParams;
use crate::linalg;
use crate::tiling::Point2;

/// `n` stations scattered over the unit square, kept at least a small
/// distance apart.
pub fn station_layout(n: usize, seed: u64) -> Vec<Point2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = 0.5 / (n as f64).sqrt();
    let mut pts: Vec<Point2> = Vec::with_capacity(n);
    let mut tries = 0;
    while pts.len() < n {
        let p = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        tries += 1;
        let ok = pts.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= min_sep);
        if ok || tries > 10_000 {
            pts.push(p);
        }
    }
    pts
}

/// `T x n` draws of a zero-mean Gaussian process whose covariance is the
/// powered exponential on `warp(x)`.
pub fn simulate_warped_gp<F>(stations: &[Point2], warp: F, params: &CovarianceParams, t: usize, seed: u64) -> Result<DMatrix<f64>>
where
    F: Fn(&Point2) -> [f64; 2],
{
    let coords: Vec<[f64; 2]> = stations.iter().map(&warp).collect();
    let z = DMatrix::from_fn(coords.len(), 2, |i, j| coords[i][j]);
    simulate_from_coords(&z, params, t, seed)
}

/// Draws for D-space coordinates given row-wise.
pub fn simulate_from_coords(coords: &DMatrix<f64>, params: &CovarianceParams, t: usize, seed: u64) -> Result<DMatrix<f64>> {
    params.validate()?;
    let sigma = crate::gplik::sigma_from_coords(coords, params);
    let (chol, _) = linalg::cholesky_with_jitter(&sigma)?;
    let l = chol.l();
    let n = coords.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(t, n);
    for r in 0..t {
        let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        y.set_row(r, &(&l * e).transpose());
    }
    Ok(y)
}

/// A smooth non-affine warp of the unit square used by the recovery
/// demonstrations.
pub fn bent_warp(x: &Point2) -> [f64; 2] {
    let s = 2.5;
    [s * (x[0] + 0.35 * (std::f64::consts::PI * x[1]).sin()), s * (x[1] + 0.35 * x[0] * x[0])]
}

/// A warp that folds the unit square along `x1 = 0.5`: points mirrored
/// across the crease share a D-space location.
pub fn folded_warp(x: &Point2) -> [f64; 2] {
    let s = 2.5;
    let u = x[0] - 0.5;
    [s * (4.0 * u * u + 0.15 * u), s * x[1]]
}

/// Map standard Gaussian values to exponential "rainfall" with mean
/// `scale`; `NaN` stays missing.
pub fn exponential_margins(z: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    z.map(|v| if v.is_finite() { -scale * crate::extremes::normal::norm_cdf(-v).ln() } else { f64::NAN })
}

/// Station ids `s01, s02, ...`.
pub fn station_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i:02}")).collect()
}
