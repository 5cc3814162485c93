//! Standard errors of the warped coordinates from the inverse negative
//! Hessian at fixed smoothing parameters, at stations and beyond them.
//!
//! ```bash
//! cargo run --release -p warpcov --example uncertainty
//! ```

use warpcov::fit::{fit_anisotropic, fit_deformation};
use warpcov::gplik::{CovarianceParams, SampleMoments};
use warpcov::reml::OuterOptions;
use warpcov::synthetic::{bent_warp, simulate_warped_gp, station_layout};
use warpcov::uncert::{dspace_standard_errors, sample_coefficients};

fn main() -> warpcov::Result<()> {
    let stations = station_layout(15, 21);
    let y = simulate_warped_gp(&stations, bent_warp, &CovarianceParams::new(1.0, 0.05, 1.5)?, 2000, 7)?;
    let m = SampleMoments::from_observations(&y)?;
    let opts = OuterOptions::default();
    let aniso = fit_anisotropic(&stations, &m, &opts)?;
    let fit = fit_deformation(&stations, &m, 10, &aniso, None, &opts)?;

    let outside = [[-0.3, -0.3], [1.3, -0.3], [1.3, 1.3], [-0.3, 1.3]];
    let se_in = dspace_standard_errors(&fit, &stations)?;
    let se_out = dspace_standard_errors(&fit, &outside)?;
    println!("mean SE at stations      {:.4}", se_in.mean());
    println!("mean SE outside the hull {:.4}", se_out.mean());

    let draws = sample_coefficients(&fit, 2000, 1)?;
    let x = fit.model.warp_points(&draws[0], &outside[..1])?;
    println!("one coefficient draw warps {:?} to ({:.3}, {:.3})", outside[0], x[(0, 0)], x[(0, 1)]);
    Ok(())
}
