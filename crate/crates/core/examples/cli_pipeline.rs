//! The command-line pipeline driven from Rust: fit, marginals, simulation
//! and plots into a temporary directory.
//!
//! ```bash
//! cargo run --release -p warpcov --example cli_pipeline
//! ```

use warpcov::cli::io::{write_csv_atomic, write_stations, write_wide};
use warpcov::gplik::CovarianceParams;
use warpcov::synthetic::{bent_warp, exponential_margins, simulate_warped_gp, station_ids, station_layout};

fn main() -> warpcov::Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let stations = station_layout(15, 21);
    let y = simulate_warped_gp(&stations, bent_warp, &CovarianceParams::new(1.0, 0.05, 1.5)?, 2000, 7)?;
    let ids = station_ids(stations.len());
    write_csv_atomic(&d.join("data.csv"), |w| write_wide(w, &ids, &y, None))?;
    write_csv_atomic(&d.join("rain.csv"), |w| write_wide(w, &ids, &exponential_margins(&y, 4.0), None))?;
    write_csv_atomic(&d.join("stations.csv"), |w| write_stations(w, &ids, &stations, None))?;

    let s = |name: &str| d.join(name).to_string_lossy().into_owned();
    let steps: [Vec<String>; 5] = [
        vec!["fit-aniso".into(), "--data".into(), s("data.csv"), "--stations".into(), s("stations.csv"), "--out".into(), s("aniso")],
        vec![
            "fit-deform".into(), "--data".into(), s("data.csv"), "--stations".into(), s("stations.csv"),
            "--aniso".into(), s("aniso/model.json"), "--out".into(), s("deform"),
        ],
        vec!["fit-marginal".into(), "--data".into(), s("rain.csv"), "--stations".into(), s("stations.csv"), "--out".into(), s("marginal")],
        vec![
            "simulate".into(), "--model".into(), s("deform/model.json"), "--marginal".into(), s("marginal/marginal.json"),
            "--years".into(), "10".into(), "--out".into(), s("sim"),
        ],
        vec!["plot".into(), "--fit".into(), s("deform"), "--out".into(), s("plots")],
    ];
    for args in steps {
        let code = warpcov::cli::run(std::iter::once("warpcov".to_string()).chain(args.iter().cloned()));
        println!("warpcov {:<13} exit {code}", args[0]);
    }
    for sub in ["aniso", "deform", "marginal", "sim", "plots"] {
        let mut names: Vec<String> = std::fs::read_dir(d.join(sub))?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        println!("{sub}/: {}", names.join(" "));
    }
    Ok(())
}
