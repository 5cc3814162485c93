//! Nonstationary spatial covariance estimation by coordinate warping.
//!
//! Stations are mapped into a deformed or expanded space where a stationary
//! powered-exponential covariance fits; warps are penalized splines with
//! smoothing chosen by REML. The [`extremes`] and [`sim`] modules add
//! threshold/GPD marginals, censored Gaussian dependence and event
//! catalogs.

pub mod basis;
pub mod cli;
pub mod error;
pub mod extremes;
pub mod fit;
pub mod gplik;
pub mod linalg;
pub mod reml;
pub mod sim;
pub mod synthetic;
pub mod tiling;
pub mod uncert;
pub mod warp;

pub use error::{Error, Result};
