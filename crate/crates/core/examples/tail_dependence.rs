//! Pairwise tail correlations by censored bivariate Gaussian likelihood,
//! then a dependence model fitted to them and a binned semivariogram.
//!
//! ```bash
//! cargo run --release -p warpcov --example tail_dependence
//! ```

use warpcov::extremes::{estimate_pairwise_rho, fit_marginal, semivariance_estimates, MarginalOptions, StationData};
use warpcov::fit::fit_anisotropic;
use warpcov::gplik::{CovarianceParams, SampleMoments};
use warpcov::reml::OuterOptions;
use warpcov::synthetic::{exponential_margins, simulate_warped_gp, station_layout};
use nalgebra::DMatrix;

fn main() -> warpcov::Result<()> {
    let stations = station_layout(10, 31);
    let truth = CovarianceParams::new(0.9, 0.1, 1.2)?;
    let z = simulate_warped_gp(&stations, |x| [3.0 * x[0], 1.5 * x[1]], &truth, 4000, 32)?;
    let data = StationData::new(exponential_margins(&z, 4.0), stations.clone(), None)?;
    let marginal = fit_marginal(&data, &MarginalOptions::default())?;
    let (gz, exceed) = marginal.to_gaussian(&data)?;
    let corr = estimate_pairwise_rho(&gz, &exceed)?;
    println!(
        "rho[0,1] = {:.3} from {} joint exceedances; effective sample size {:.0}",
        corr.rho[(0, 1)],
        corr.joint_exceedances[(0, 1)],
        corr.effective_sample_size().unwrap_or(f64::NAN)
    );

    let moments = SampleMoments::from_covariance(corr.rho.clone(), z.nrows())?;
    let fit = fit_anisotropic(&stations, &moments, &OuterOptions::default())?;
    let c = fit.covariance();
    println!("fitted sigma2 {:.3} tau2 {:.3} alpha {:.3}", c.sigma2, c.tau2, c.alpha);

    let coords = DMatrix::from_fn(stations.len(), 2, |i, k| stations[i][k]);
    for bin in semivariance_estimates(&corr.rho, &coords, 6)?.bins {
        println!("  h {:.3}  gamma {:.3}  ({} pairs)", bin.mean_distance, bin.gamma, bin.count);
    }
    Ok(())
}
