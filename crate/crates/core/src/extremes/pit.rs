//! Probability integral transform between the data scale and a unit
//! Gaussian scale censored at the threshold.

use serde::{Deserialize, Serialize};

use super::gpd::{gpd_excess_from_survival, gpd_survival, gpd_upper_endpoint};
use super::normal::{norm_cdf, norm_upper_quantile};

/// Marginal parameters at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginAt {
    pub zeta: f64,
    pub threshold: f64,
    pub psi: f64,
    pub xi: f64,
}

/// `Phi^-1(1 - zeta)`, the Gaussian value of every non-exceedance.
pub fn censoring_point(zeta: f64) -> f64 {
    norm_upper_quantile(zeta)
}

/// `Phi^-1(1 - zeta (1 - F_GPD(y - u)))` above the threshold, the censoring
/// point at or below it. Values beyond a finite upper endpoint are clamped
/// there.
pub fn pit_to_gaussian(y: f64, m: &MarginAt) -> f64 {
    if y <= m.threshold {
        return censoring_point(m.zeta);
    }
    let excess = y - m.threshold;
    let mut s = gpd_survival(excess, m.psi, m.xi);
    if s <= 0.0 {
        log::warn!(
            "value {y} lies beyond the GPD upper endpoint {}; clamped",
            m.threshold + gpd_upper_endpoint(m.psi, m.xi)
        );
        s = f64::MIN_POSITIVE;
    }
    norm_upper_quantile(m.zeta * s)
}

/// Data-scale value for a Gaussian value at or above the censoring point,
/// `None` below it.
pub fn inverse_pit(z: f64, m: &MarginAt) -> Option<f64> {
    let c = censoring_point(m.zeta);
    if z < c {
        return None;
    }
    if z == c {
        return Some(m.threshold);
    }
    let s = (norm_cdf(-z) / m.zeta).min(1.0);
    Some(m.threshold + gpd_excess_from_survival(s, m.psi, m.xi))
}
