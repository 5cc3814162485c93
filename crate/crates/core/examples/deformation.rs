//! Fit an anisotropic model and a thin plate spatial deformation to data
//! simulated on a bent D-space, then compare them.
//!
//! ```bash
//! cargo run --release -p warpcov --example deformation
//! ```

use std::time::Instant;

use warpcov::fit::{fit_anisotropic, fit_deformation};
use warpcov::gplik::{CovarianceParams, SampleMoments};
use warpcov::reml::OuterOptions;
use warpcov::synthetic::{bent_warp, simulate_warped_gp, station_layout};

fn main() -> warpcov::Result<()> {
    let stations = station_layout(15, 21);
    let truth = CovarianceParams::new(1.0, 0.05, 1.5)?;
    let y = simulate_warped_gp(&stations, bent_warp, &truth, 2000, 7)?;
    let moments = SampleMoments::from_observations(&y)?;
    let opts = OuterOptions::default();

    let t0 = Instant::now();
    let aniso = fit_anisotropic(&stations, &moments, &opts)?;
    println!("anisotropic  AIC {:10.2}  edf {:5.2}  rmse {:.4}", aniso.aic, aniso.edf, aniso.semivariogram_rmse()?);

    let deform = fit_deformation(&stations, &moments, 10, &aniso, None, &opts)?;
    println!(
        "deformation  AIC {:10.2}  edf {:5.2}  rmse {:.4}  lambda {:?}",
        deform.aic,
        deform.edf,
        deform.semivariogram_rmse()?,
        deform.lambda
    );
    println!("converged: {}  ({:.1?})", deform.converged, t0.elapsed());
    for d in &deform.diagnostics {
        println!("  {d}");
    }
    Ok(())
}
