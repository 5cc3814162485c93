//! Simulate a seasonal event catalog on a grid, rank events by loss and
//! check the per-cell exceedance rate.
//!
//! ```bash
//! cargo run --release -p warpcov --example event_catalog
//! ```

use warpcov::extremes::{fit_marginal, MarginalOptions, StationData};
use warpcov::fit::fit_anisotropic;
use warpcov::gplik::{CovarianceParams, SampleMoments};
use warpcov::reml::OuterOptions;
use warpcov::sim::{rank_events, simulate_catalog, SimGrid, SimOptions};
use warpcov::synthetic::{exponential_margins, simulate_warped_gp, station_layout};
use warpcov::tiling::Rect;

fn main() -> warpcov::Result<()> {
    let stations = station_layout(10, 9);
    let p = CovarianceParams::new(1.0, 0.05, 1.5)?;
    let z = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, 2000, 10)?;
    let fit = fit_anisotropic(&stations, &SampleMoments::from_observations(&z)?, &OuterOptions::default())?;
    let marginal = fit_marginal(&StationData::new(exponential_margins(&z, 4.0), stations.clone(), None)?, &MarginalOptions::default())?;

    // the unit square read as degrees of longitude and latitude
    let grid = SimGrid::regular(Rect { xmin: 0.0, xmax: 1.0, ymin: 0.0, ymax: 1.0 }, 12, 12)?;
    let catalog = simulate_catalog(&fit, &marginal, &grid, &SimOptions::years(20, 214, 1))?;
    let cells = grid.len() as f64;
    let exceed: usize = catalog.events.iter().map(|e| e.exceeding_cells()).sum();
    println!("{} events over {} cells; exceedance rate {:.4}", catalog.events.len(), grid.len(), exceed as f64 / (cells * catalog.events.len() as f64));
    for (k, e) in rank_events(&catalog, 5).iter().enumerate() {
        println!("  #{}: event {} loss {:.4} over {} cells", k + 1, e.index, e.loss, e.exceeding_cells());
    }
    Ok(())
}

