use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use warpcov::cli::io::{write_csv_atomic, write_stations, write_wide};
use warpcov::gplik::CovarianceParams;
use warpcov::synthetic::{exponential_margins, folded_warp, simulate_warped_gp, station_ids, station_layout};
use warpcov::tiling::Point2;

fn warpcov(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_warpcov")).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_dataset(dir: &Path, stations: &[Point2], y: &nalgebra::DMatrix<f64>) -> (PathBuf, PathBuf) {
    let ids = station_ids(stations.len());
    let data = dir.join("data.csv");
    let meta = dir.join("stations.csv");
    write_csv_atomic(&data, |b| write_wide(b, &ids, y, None)).unwrap();
    write_csv_atomic(&meta, |b| write_stations(b, &ids, stations, None)).unwrap();
    (data, meta)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gaussian_dataset(dir: &Path, n: usize, t: usize, seed: u64) -> (PathBuf, PathBuf) {
    let stations = station_layout(n, seed);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let y = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, t, seed + 1).unwrap();
    write_dataset(dir, &stations, &y)
}

/// Gaussian dependence model plus a constant marginal on exponential data.
fn model_and_marginal(dir: &Path) -> (PathBuf, PathBuf) {
    let (data, meta) = gaussian_dataset(dir, 8, 1500, 5);
    let rain = dir.join("rain");
    fs::create_dir_all(&rain).unwrap();
    let stations = station_layout(8, 5);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let z = simulate_warped_gp(&stations, |x| [2.0 * x[0], 2.0 * x[1]], &p, 1500, 6).unwrap();
    let (rdata, rmeta) = write_dataset(&rain, &stations, &exponential_margins(&z, 4.0));
    let fit = dir.join("fit");
    assert_eq!(warpcov(&["fit-aniso", "--data", s(&data), "--stations", s(&meta), "--out", s(&fit)]), 0);
    let marg = dir.join("marg");
    assert_eq!(warpcov(&["fit-marginal", "--data", s(&rdata), "--stations", s(&rmeta), "--out", s(&marg)]), 0);
    (fit.join("model.json"), marg.join("marginal.json"))
}

#[test]
fn simulate_is_deterministic_and_handles_zero_events() {
    let dir = tempfile::tempdir().unwrap();
    let (model, marginal) = model_and_marginal(dir.path());
    let run = |name: &str, count: &str, seed: &str| {
        let out = dir.path().join(name);
        let code = warpcov(&[
            "simulate", "--model", s(&model), "--marginal", s(&marginal), "--count", count, "--seed", seed, "--nx", "6", "--ny", "5",
            "--out", s(&out),
        ]);
        (code, out)
    };
    let (code, empty) = run("empty", "0", "1");
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(empty.join("catalog.csv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(empty.join("losses.csv")).unwrap().lines().count(), 1);

    let (c1, a) = run("a", "300", "17");
    let (c2, b) = run("b", "300", "17");
    assert_eq!((c1, c2), (0, 0));
    let top = fs::read_to_string(a.join("top_events.csv")).unwrap();
    assert_eq!(top.lines().next().unwrap(), "rank,event,loss,exceeding_cells,field_csv");
    assert_eq!(top.lines().count(), 5);
    let mut files = vec!["catalog.csv".to_string(), "losses.csv".into(), "top_events.csv".into(), "grid.csv".into()];
    for line in top.lines().skip(1) {
        let field = line.rsplit(',').next().unwrap().to_string();
        assert!(a.join(&field).is_file());
        files.push(field);
    }
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (_, c) = run("c", "300", "18");
    assert_ne!(fs::read(a.join("catalog.csv")).unwrap(), fs::read(c.join("catalog.csv")).unwrap());

    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["args"]["seed"], 17);
    assert!(manifest["outputs"].as_array().unwrap().iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn marginal_fit_reports_calibration_and_full_surfaces() {
    let dir = tempfile::tempdir().unwrap();
    let (_, marginal) = model_and_marginal(dir.path());
    let out = marginal.parent().unwrap();
    let cal = json(&out.join("calibration.json"));
    assert!((cal["exceedance_rate"].as_f64().unwrap() - 0.03).abs() <= 0.01);
    assert_eq!(cal["within_tolerance"], true);
    let surfaces = fs::read_to_string(out.join("surfaces.csv")).unwrap();
    let rows: Vec<&str> = surfaces.lines().skip(1).collect();
    assert_eq!(rows.len(), 400);
    for r in rows {
        assert!(r.split(',').all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), "{r}");
    }
}

#[test]
fn near_fold_penalty_removes_folds() {
    let dir = tempfile::tempdir().unwrap();
    let stations = station_layout(15, 4);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let y = simulate_warped_gp(&stations, folded_warp, &p, 2000, 11).unwrap();
    let (data, meta) = write_dataset(dir.path(), &stations, &y);
    let aniso = dir.path().join("aniso");
    assert_eq!(warpcov(&["fit-aniso", "--data", s(&data), "--stations", s(&meta), "--out", s(&aniso)]), 0);
    let model = aniso.join("model.json");
    let mut folds = Vec::new();
    for kind in ["none", "near"] {
        let out = dir.path().join(kind);
        let code = warpcov(&[
            "fit-deform", "--data", s(&data), "--stations", s(&meta), "--aniso", s(&model), "--fold-penalty", kind, "--out", s(&out),
        ]);
        assert_eq!(code, 0, "{kind}");
        let report = json(&out.join("fold_report.json"));
        folds.push(report["fold_count"].as_u64().unwrap());
    }
    assert!(folds[0] > 0, "unpenalized fit should fold: {folds:?}");
    assert_eq!(folds[1], 0);
    let near = json(&dir.path().join("near/fold_report.json"));
    assert_eq!(near["penalty"]["kind"], "near");
    assert_eq!(near["penalty"]["epsilon_frac"], 0.1);
    assert_eq!(near["penalty"]["delta"], 1e6);
}

fn parameter_count(model: &Value) -> usize {
    // nalgebra writes a vector as [data, nrows, ncols]
    let beta = &model["beta"];
    let coefs = if beta[0].is_array() { beta[0].as_array().unwrap().len() } else { beta.as_array().unwrap().len() };
    coefs + model["lambda"].as_array().unwrap().len()
}

#[test]
fn second_added_dimension_costs_thirteen_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (data, meta) = gaussian_dataset(dir.path(), 15, 1000, 8);
    let mut counts = Vec::new();
    for r in ["1", "2"] {
        let out = dir.path().join(format!("r{r}"));
        let code = warpcov(&["fit-dimexp", "--data", s(&data), "--stations", s(&meta), "--r", r, "--rank", "12", "--out", s(&out)]);
        assert_eq!(code, 0);
        counts.push(parameter_count(&json(&out.join("model.json"))));
    }
    assert_eq!(counts[1] - counts[0], 13);
}

#[test]
fn plots_are_views_of_the_fit_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, meta) = gaussian_dataset(dir.path(), 10, 800, 12);
    let fit = dir.path().join("fit");
    assert_eq!(warpcov(&["fit-dimexp", "--data", s(&data), "--stations", s(&meta), "--r", "1", "--rank", "6", "--out", s(&fit)]), 0);
    assert_eq!(warpcov(&["plot", "--fit", s(&fit)]), 0);

    let sv = fs::read_to_string(fit.join("semivariogram.svg")).unwrap();
    assert_eq!(sv.matches("class=\"model-curve\"").count(), 1);
    assert_eq!(sv.matches("class=\"pair\"").count(), 45);
    assert!(sv.matches("class=\"bin\"").count() > 0);
    assert!(fit.join("added_dim_1.svg").is_file());
    assert!(fit.join("warped_grid.svg").is_file());

    let mut rdr = csv::Reader::from_path(fit.join("se_grid.csv")).unwrap();
    let want: Vec<String> = rdr.records().map(|r| r.unwrap()).filter(|r| &r[2] == "0").map(|r| r[3].to_string()).collect();
    let svg = fs::read_to_string(fit.join("se_dim_0.svg")).unwrap();
    let got: Vec<String> = svg.split("data-value=\"").skip(1).map(|t| t.split('"').next().unwrap().to_string()).collect();
    assert_eq!(got, want);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = dir.path().join("out");
    assert_eq!(warpcov(&["fit-aniso", "--data", s(&missing), "--stations", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(warpcov(&["plot", "--fit", s(&dir.path().join("nothing"))]), 2);
    assert_eq!(warpcov(&["fit-deform", "--fold-penalty", "maybe"]), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "s01,s02,s03\n1,x,2\n").unwrap();
    let meta = dir.path().join("meta.csv");
    fs::write(&meta, "id,lon,lat\ns01,0,0\ns02,1,0\ns03,0,1\n").unwrap();
    assert_eq!(warpcov(&["fit-aniso", "--data", s(&bad), "--stations", s(&meta), "--out", s(&out)]), 2);

    // an outer budget of one iteration cannot converge: exit 3, model written and flagged
    let (data, meta) = gaussian_dataset(dir.path(), 10, 500, 3);
    let fit = dir.path().join("short");
    let code = warpcov(&["fit-deform", "--data", s(&data), "--stations", s(&meta), "--rank", "6", "--max-outer-iter", "1", "--out", s(&fit)]);
    assert_eq!(code, 3);
    let model = json(&fit.join("model.json"));
    assert_eq!(model["converged"], false);
    assert_eq!(json(&fit.join("manifest.json"))["status"], "not-converged");
}

#[test]
fn dependence_on_stationary_data_prefers_no_deformation() {
    let dir = tempfile::tempdir().unwrap();
    let stations = station_layout(10, 31);
    let p = CovarianceParams::new(1.0, 0.05, 1.5).unwrap();
    let z = simulate_warped_gp(&stations, |x| [1.5 * x[0], 1.5 * x[1]], &p, 3000, 32).unwrap();
    let (data, meta) = write_dataset(dir.path(), &stations, &exponential_margins(&z, 4.0));
    let marg = dir.path().join("marg");
    assert_eq!(warpcov(&["fit-marginal", "--data", s(&data), "--stations", s(&meta), "--out", s(&marg)]), 0);
    let out = dir.path().join("dep");
    let code = warpcov(&[
        "fit-dependence", "--data", s(&data), "--stations", s(&meta), "--marginal", s(&marg.join("marginal.json")), "--rank", "6",
        "--out", s(&out),
    ]);
    assert_eq!(code, 0);
    let report = json(&out.join("aic_report.json"));
    let edf_gap = report["edf_deformation"].as_f64().unwrap() - report["edf_anisotropic"].as_f64().unwrap();
    // censored pairs carry far less information than the row count, so
    // AIC gaps are judged after the overdispersion correction
    assert!(report["overdispersion"].as_f64().unwrap() > 1.0);
    let diff = report["qaic_difference"].as_f64().unwrap();
    assert!(diff >= -2.0 * edf_gap.max(0.0), "deformation QAIC better by {diff} with {edf_gap} extra edf: {report}");

    let pairs = fs::read_to_string(out.join("rho_pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 1 + 45);
    let corr = fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 11);
    for sub in ["anisotropic", "deformation"] {
        assert!(out.join(sub).join("model.json").is_file());
    }

    // the anisotropic warp maps grid lines to grid lines
    let mut rdr = csv::Reader::from_path(out.join("anisotropic/warped_grid.csv")).unwrap();
    let rows: Vec<(usize, usize, f64, f64)> =
        rdr.records().map(|r| r.unwrap()).map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap())).collect();
    for a in &rows {
        for b in &rows {
            if a.0 == b.0 {
                assert!((a.2 - b.2).abs() < 1e-9);
            }
            if a.1 == b.1 {
                assert!((a.3 - b.3).abs() < 1e-9);
            }
        }
    }
}
