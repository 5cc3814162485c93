//! Threshold by ALD quantile regression, GPD excess surfaces and the
//! probability integral transform to the censored Gaussian scale.
//!
//! ```bash
//! cargo run --release -p warpcov --example marginals
//! ```

use warpcov::extremes::{censoring_point, fit_marginal, MarginalOptions, StationData};
use warpcov::gplik::CovarianceParams;
use warpcov::synthetic::{exponential_margins, simulate_warped_gp, station_layout};

fn main() -> warpcov::Result<()> {
    let stations = station_layout(12, 3);
    let p = CovarianceParams::new(1.0, 0.05, 1.5)?;
    let z = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, 3000, 4)?;
    // exponential rainfall with mean 4: the 97% quantile is 4 ln(1/0.03)
    let data = StationData::new(exponential_margins(&z, 4.0), stations.clone(), None)?;
    let model = fit_marginal(&data, &MarginalOptions::default())?;

    let m = model.at(&stations[0], None)?;
    println!("threshold {:.3} (exact {:.3})", m.threshold, 4.0 * (1.0f64 / 0.03).ln());
    println!("GPD scale {:.3} shape {:.3} (exact 4, 0)", m.psi, m.xi);
    println!("training exceedance rate {:.4} from {} excesses", model.exceedance_rate, model.n_excesses);

    let (gz, exceed) = model.to_gaussian(&data)?;
    let c = censoring_point(model.zeta);
    let share = exceed.iter().filter(|e| **e).count() as f64 / exceed.len() as f64;
    let top = gz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("censoring point {c:.5}; {:.2}% of values above it; largest z {top:.2}", 100.0 * share);
    Ok(())
}
