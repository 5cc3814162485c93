//! fit-marginal and fit-dependence.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::io::{self, write_atomic, write_csv_atomic, Manifest};
use super::warp_cmd::{finish_fit, fold_options, LoadedData};
use super::{FitDependenceArgs, FitMarginalArgs, SampleSize, Status};
use crate::error::{Error, Result};
use crate::extremes::{
    estimate_pairwise_rho, fit_marginal as fit_marginal_model, semivariance_estimates, MarginalModel, MarginalOptions,
    StationData, SurfaceSpec,
};
use crate::fit::{fit_anisotropic, fit_deformation};
use crate::gplik::SampleMoments;
use crate::sim::SimGrid;
use crate::tiling::Rect;

/// Allowed gap between the training exceedance rate and `zeta`.
pub const CALIBRATION_TOLERANCE: f64 = 0.01;

fn load(data: &Path, stations: &Path, covariate: Option<&str>) -> Result<(StationData, Vec<String>)> {
    let wide = io::read_wide(data)?;
    let table = io::read_stations(stations)?;
    let sd = io::station_data(&wide, &table, covariate)?;
    Ok((sd, wide.ids))
}

fn marginal_options(args: &FitMarginalArgs) -> MarginalOptions {
    let cov_rank = args.covariate.as_ref().map(|_| args.covariate_rank);
    let mut opts = match args.rank {
        Some(k) => MarginalOptions::spatial(args.zeta, k, cov_rank),
        None => {
            let spec = SurfaceSpec { spatial_rank: None, covariate_rank: cov_rank };
            MarginalOptions {
                zeta: args.zeta,
                threshold: spec,
                ald_scale: spec,
                gpd_scale: spec,
                gpd_shape: spec,
                ..MarginalOptions::default()
            }
        }
    };
    opts.bandwidth = args.bandwidth;
    opts.outer = args.optimizer.options();
    opts
}

#[derive(Serialize)]
struct StationRate {
    id: String,
    observed: usize,
    exceedances: usize,
    rate: f64,
}

#[derive(Serialize)]
struct Calibration {
    zeta: f64,
    exceedance_rate: f64,
    tolerance: f64,
    within_tolerance: bool,
    n_excesses: usize,
    stations: Vec<StationRate>,
}

fn calibration(model: &MarginalModel, data: &StationData, ids: &[String]) -> Result<Calibration> {
    let mut stations = Vec::with_capacity(ids.len());
    for (s, ys) in data.station_values().iter().enumerate() {
        let u = model.threshold.value(&data.stations[s], data.covariate_at(s))?;
        let exceedances = ys.iter().filter(|y| **y > u).count();
        stations.push(StationRate {
            id: ids[s].clone(),
            observed: ys.len(),
            exceedances,
            rate: exceedances as f64 / ys.len().max(1) as f64,
        });
    }
    Ok(Calibration {
        zeta: model.zeta,
        exceedance_rate: model.exceedance_rate,
        tolerance: CALIBRATION_TOLERANCE,
        within_tolerance: (model.exceedance_rate - model.zeta).abs() <= CALIBRATION_TOLERANCE,
        n_excesses: model.n_excesses,
        stations,
    })
}

fn surface_grid(args: &FitMarginalArgs, model: &MarginalModel) -> Result<SimGrid> {
    match &args.grid {
        Some(p) => io::read_grid(p, args.covariate.as_deref()),
        None if model.uses_covariate() => {
            Err(Error::InvalidConfig("covariate surfaces need --grid with the covariate column".into()))
        }
        None => SimGrid::regular(Rect::bounding(&model.stations)?, args.grid_nx, args.grid_ny),
    }
}

pub fn fit_marginal(args: &FitMarginalArgs) -> Result<Status> {
    let (data, ids) = load(&args.data, &args.stations, args.covariate.as_deref())?;
    let mut model = fit_marginal_model(&data, &marginal_options(args))?;
    let config = serde_json::json!({ "command": "fit-marginal", "args": serde_json::to_value(args)? });
    model.run_config = Some(config.clone());
    let grid = surface_grid(args, &model)?;
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();

    let mp = args.out.join("marginal.json");
    write_atomic(&mp, model.to_json()?.as_bytes())?;
    written.push(mp);

    let sp = args.out.join("surfaces.csv");
    write_csv_atomic(&sp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["lon", "lat"];
        if grid.covariate.is_some() {
            header.push("covariate");
        }
        header.extend(["threshold", "ald_scale", "gpd_scale", "gpd_shape"]);
        w.write_record(&header)?;
        for (c, p) in grid.points.iter().enumerate() {
            let cov = grid.covariate.as_ref().map(|v| v[c]);
            let m = model.at(p, cov)?;
            let mut rec = vec![p[0].to_string(), p[1].to_string()];
            if let Some(v) = cov {
                rec.push(v.to_string());
            }
            rec.extend([m.threshold, model.ald_scale_at(p, cov)?, m.psi, m.xi].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(sp);

    let cal = calibration(&model, &data, &ids)?;
    if !cal.within_tolerance {
        log::warn!("exceedance rate {} is more than {} from zeta {}", cal.exceedance_rate, CALIBRATION_TOLERANCE, cal.zeta);
    }
    let cp = args.out.join("calibration.json");
    write_atomic(&cp, serde_json::to_string_pretty(&cal)?.as_bytes())?;
    written.push(cp);

    let mut manifest = Manifest::new("fit-marginal", config);
    manifest.input(&args.data)?;
    manifest.input(&args.stations)?;
    if let Some(g) = &args.grid {
        manifest.input(g)?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    let status = Status::from_converged(model.converged());
    if status != Status::Ok {
        manifest.status = "not-converged".into();
    }
    manifest.write(&args.out)?;
    Ok(status)
}

#[derive(Serialize)]
struct AicReport {
    rows: usize,
    /// `T` used in the likelihood.
    sample_size: f64,
    effective_sample_size: Option<f64>,
    /// `max(1, sample_size / effective_sample_size)`.
    overdispersion: f64,
    aic_anisotropic: f64,
    aic_deformation: f64,
    edf_anisotropic: f64,
    edf_deformation: f64,
    /// `aic_deformation - aic_anisotropic`; negative favours the deformation.
    difference: f64,
    preferred: &'static str,
    /// `-2 loglik / overdispersion + 2 edf`.
    qaic_anisotropic: f64,
    qaic_deformation: f64,
    qaic_difference: f64,
    preferred_by_qaic: &'static str,
    converged: bool,
}

fn prefer(diff: f64) -> &'static str {
    if diff < 0.0 { "deformation" } else { "anisotropic" }
}

pub fn fit_dependence(args: &FitDependenceArgs) -> Result<Status> {
    let (data, ids) = load(&args.data, &args.stations, args.covariate.as_deref())?;
    let marginal = MarginalModel::from_json(&std::fs::read_to_string(&args.marginal)?)?;
    if marginal.stations != data.stations {
        log::warn!("marginal model was fitted at different stations; evaluating its surfaces at the data stations");
    }
    let (z, exceed) = marginal.to_gaussian(&data)?;
    let corr = estimate_pairwise_rho(&z, &exceed)?;
    let out = &args.output.out;
    std::fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();

    let pp = out.join("rho_pairs.csv");
    let n = ids.len();
    write_csv_atomic(&pp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["i", "j", "station_i", "station_j", "rho", "joint_rows", "joint_exceedances", "at_boundary"])?;
        for i in 0..n {
            for j in (i + 1)..n {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    ids[i].clone(),
                    ids[j].clone(),
                    corr.rho[(i, j)].to_string(),
                    corr.counts[(i, j)].to_string(),
                    corr.joint_exceedances[(i, j)].to_string(),
                    corr.boundary.contains(&(i, j)).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(pp);

    let cp = out.join("correlation.csv");
    write_csv_atomic(&cp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let header: Vec<String> = std::iter::once("id".to_string()).chain(ids.iter().cloned()).collect();
        w.write_record(&header)?;
        for i in 0..n {
            let rec: Vec<String> = std::iter::once(ids[i].clone()).chain((0..n).map(|j| corr.rho[(i, j)].to_string())).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(cp);

    let coords = nalgebra::DMatrix::from_fn(n, 2, |i, k| data.stations[i][k]);
    let sv = semivariance_estimates(&corr.rho, &coords, args.bins)?;
    let bp = out.join("semivariance_bins.csv");
    write_csv_atomic(&bp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["lower", "upper", "mean_distance", "gamma", "count"])?;
        for b in &sv.bins {
            w.write_record([b.lower.to_string(), b.upper.to_string(), b.mean_distance.to_string(), b.gamma.to_string(), b.count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(bp);

    let rows = data.values.nrows();
    let t_eff = corr.effective_sample_size();
    let t = match (args.sample_size, t_eff) {
        (SampleSize::Rows, _) => rows,
        (SampleSize::Effective, Some(te)) => (te.round() as usize).clamp(2, rows),
        (SampleSize::Effective, None) => {
            return Err(Error::Data("no pair gives a usable effective sample size".into()));
        }
    };
    log::info!("likelihood sample size {t} ({rows} rows, effective {t_eff:?})");
    let moments = SampleMoments::from_covariance(corr.rho.clone(), t)?;
    let loaded = LoadedData { ids: ids.clone(), stations: data.stations.clone(), values: data.values.clone(), inputs: Vec::new() };
    let opts = args.optimizer.options();
    let aniso = fit_anisotropic(&data.stations, &moments, &opts)?;
    let mut deform_opts = opts.clone();
    let fold = fold_options(&args.fold, &args.output, &mut deform_opts);
    let rank = args.rank.min(n.saturating_sub(1));
    let deform = fit_deformation(&data.stations, &moments, rank, &aniso, fold.as_ref(), &deform_opts)?;

    let c = t_eff.map_or(1.0, |te| (t as f64 / te).max(1.0));
    let qaic = |f: &crate::fit::FitResult| -2.0 * f.loglik / c + 2.0 * f.edf;
    let report = AicReport {
        rows,
        sample_size: t as f64,
        effective_sample_size: t_eff,
        overdispersion: c,
        aic_anisotropic: aniso.aic,
        aic_deformation: deform.aic,
        edf_anisotropic: aniso.edf,
        edf_deformation: deform.edf,
        difference: deform.aic - aniso.aic,
        preferred: prefer(deform.aic - aniso.aic),
        qaic_anisotropic: qaic(&aniso),
        qaic_deformation: qaic(&deform),
        qaic_difference: qaic(&deform) - qaic(&aniso),
        preferred_by_qaic: prefer(qaic(&deform) - qaic(&aniso)),
        converged: aniso.converged && deform.converged,
    };
    let inputs = [args.data.as_path(), args.stations.as_path(), args.marginal.as_path()];
    let mut status = Status::Ok;
    for (name, fit, fold) in [("anisotropic", aniso, None), ("deformation", deform, fold.as_ref())] {
        let mut sub = args.output.clone();
        sub.out = out.join(name);
        status = status.and(finish_fit("fit-dependence", args, fit, &loaded, &sub, fold, &inputs)?);
        written.push(sub.out.join("manifest.json"));
    }
    let ap = out.join("aic_report.json");
    write_atomic(&ap, serde_json::to_string_pretty(&report)?.as_bytes())?;
    written.push(ap);

    let mut manifest = Manifest::new("fit-dependence", serde_json::json!({ "command": "fit-dependence", "args": serde_json::to_value(args)? }));
    for p in inputs {
        manifest.input(p)?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    if status != Status::Ok {
        manifest.status = "not-converged".into();
    }
    manifest.write(out)?;
    Ok(status)
}
