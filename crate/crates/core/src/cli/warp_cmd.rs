//! fit-aniso, fit-deform and fit-dimexp, plus the shared fit exports.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use super::io::{self, write_atomic, write_csv_atomic, Manifest};
use super::{DataArgs, FitAnisoArgs, FitDeformArgs, FitDimexpArgs, FoldArgs, OutputArgs, Status};
use crate::error::{Error, Result};
use crate::fit::{default_tiling, fit_anisotropic, fit_deformation, fit_dimension_expansion, FitResult, FoldOptions};
use crate::gplik::SampleMoments;
use crate::reml::OuterOptions;
use crate::tiling::{fold_count, Point2, Rect};
use crate::uncert::standard_error_rows;

/// Station ids, locations and the `T x n` table, preprocessed.
pub(super) struct LoadedData {
    pub ids: Vec<String>,
    pub stations: Vec<Point2>,
    pub values: DMatrix<f64>,
    pub inputs: Vec<PathBuf>,
}

pub(super) fn load(args: &DataArgs) -> Result<LoadedData> {
    let wide = io::read_wide(&args.data)?;
    let table = io::read_stations(&args.stations)?;
    let data = io::station_data(&wide, &table, None)?;
    let mut values = data.values;
    if args.detrend {
        detrend(&mut values);
    }
    Ok(LoadedData { ids: wide.ids, stations: data.stations, values, inputs: vec![args.data.clone(), args.stations.clone()] })
}

/// Subtract a least-squares line in the row index from every column,
/// using each column's observed rows.
pub fn detrend(values: &mut DMatrix<f64>) {
    for mut col in values.column_iter_mut() {
        let obs: Vec<(f64, f64)> = col.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(t, v)| (t as f64, *v)).collect();
        if obs.len() < 2 {
            continue;
        }
        let n = obs.len() as f64;
        let tm = obs.iter().map(|o| o.0).sum::<f64>() / n;
        let ym = obs.iter().map(|o| o.1).sum::<f64>() / n;
        let sxx: f64 = obs.iter().map(|o| (o.0 - tm).powi(2)).sum();
        let sxy: f64 = obs.iter().map(|o| (o.0 - tm) * (o.1 - ym)).sum();
        let slope = sxy / sxx;
        for (t, v) in col.iter_mut().enumerate() {
            if v.is_finite() {
                *v -= slope * (t as f64 - tm);
            }
        }
    }
}

fn moments(data: &LoadedData) -> Result<SampleMoments> {
    SampleMoments::from_observations(&data.values)
}

fn capped_rank(rank: usize, n: usize) -> usize {
    let cap = n.saturating_sub(1);
    if rank > cap {
        log::warn!("rank {rank} exceeds {cap} (stations - 1); using {cap}");
    }
    rank.min(cap)
}

fn read_fit(path: &Path) -> Result<FitResult> {
    FitResult::from_json(&std::fs::read_to_string(path)?)
}

fn aniso_start(path: Option<&Path>, data: &LoadedData, m: &SampleMoments, opts: &OuterOptions) -> Result<FitResult> {
    match path {
        Some(p) => {
            let fit = read_fit(p)?;
            if fit.stations != data.stations {
                return Err(Error::Data(format!("{}: stations differ from the data", p.display())));
            }
            Ok(fit)
        }
        None => fit_anisotropic(&data.stations, m, opts),
    }
}

/// Fold options from the command line; the strict penalty is accepted
/// despite its kinks.
pub(super) fn fold_options(fold: &FoldArgs, out: &OutputArgs, opts: &mut OuterOptions) -> Option<FoldOptions> {
    let kind = fold.fold_penalty.kind()?;
    if kind == crate::tiling::FoldPenaltyKind::Strict {
        log::warn!("strict fold penalty is not differentiable; the REML criterion is approximate");
        opts.force_nondifferentiable = true;
    }
    Some(FoldOptions { kind, delta: fold.delta, epsilon_frac: fold.epsilon_frac, nx: out.grid_nx, ny: out.grid_ny, domain: None })
}

#[derive(Serialize)]
struct FoldReport<'a> {
    nx: usize,
    ny: usize,
    triangles: usize,
    fold_count: usize,
    penalty: Option<&'a FoldOptions>,
}

fn config_value<T: Serialize>(command: &str, args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "command": command, "args": serde_json::to_value(args)? }))
}

/// Write the model file and every derived table for one fit into `dir`.
/// Returns the written paths.
pub(super) fn write_fit_outputs(
    dir: &Path,
    fit: &FitResult,
    ids: &[String],
    out: &OutputArgs,
    fold: Option<&FoldOptions>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let model = dir.join("model.json");
    write_atomic(&model, fit.to_json()?.as_bytes())?;
    written.push(model);

    let sv = dir.join("semivariogram.csv");
    let pairs = fit.pairwise_semivariances()?;
    write_csv_atomic(&sv, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["i", "j", "station_i", "station_j", "distance", "empirical", "model"])?;
        for p in &pairs {
            w.write_record([
                p.i.to_string(),
                p.j.to_string(),
                ids[p.i].clone(),
                ids[p.j].clone(),
                p.distance.to_string(),
                p.empirical.to_string(),
                p.model.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(sv);

    let q = fit.model.output_dim();
    let warped_header = |lead: &[&str]| -> Vec<String> {
        lead.iter().map(|s| s.to_string()).chain((1..=q).map(|d| format!("w{d}"))).collect()
    };
    let ws = dir.join("warped_stations.csv");
    let zs = fit.warp_points(&fit.stations)?;
    write_csv_atomic(&ws, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(warped_header(&["id", "x1", "x2"]))?;
        for (s, p) in fit.stations.iter().enumerate() {
            let mut rec = vec![ids[s].clone(), p[0].to_string(), p[1].to_string()];
            rec.extend(zs.row(s).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(ws);

    let (nx, ny, domain) = match fold {
        Some(f) => (f.nx, f.ny, f.domain),
        None => (out.grid_nx, out.grid_ny, None),
    };
    let tiling = default_tiling(&fit.stations, nx, ny, domain)?;
    let zg = fit.warp_points(&tiling.vertices)?;
    let wg = dir.join("warped_grid.csv");
    write_csv_atomic(&wg, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(warped_header(&["i", "j", "x1", "x2"]))?;
        for (k, p) in tiling.vertices.iter().enumerate() {
            let mut rec = vec![(k % nx).to_string(), (k / nx).to_string(), p[0].to_string(), p[1].to_string()];
            rec.extend(zg.row(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(wg);

    let folds = match fit.fold_count()? {
        Some(c) => c,
        None => {
            let plane: Vec<Point2> = (0..zg.nrows()).map(|k| [zg[(k, 0)], zg[(k, 1)]]).collect();
            fold_count(&tiling, &plane)?
        }
    };
    let report = FoldReport { nx, ny, triangles: tiling.len(), fold_count: folds, penalty: fold };
    let fr = dir.join("fold_report.json");
    write_atomic(&fr, serde_json::to_string_pretty(&report)?.as_bytes())?;
    written.push(fr);

    let se = dir.join("se_grid.csv");
    let pts = se_points(&fit.stations, out.se_margin, out.se_n)?;
    let rows = standard_error_rows(fit, &pts)?;
    write_csv_atomic(&se, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["x1", "x2", "dim", "se"])?;
        for r in &rows {
            w.write_record([r.x1.to_string(), r.x2.to_string(), r.dim.to_string(), r.se.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(se);
    Ok(written)
}

/// Regular `n x n` grid over the station box widened by `margin` of its
/// extent on every side.
pub fn se_points(stations: &[Point2], margin: f64, n: usize) -> Result<Vec<Point2>> {
    if n < 2 || !(margin >= 0.0) {
        return Err(Error::InvalidConfig("standard-error grid needs n >= 2 and a non-negative margin".into()));
    }
    let r = Rect::bounding(stations)?;
    let (mx, my) = (margin * (r.xmax - r.xmin), margin * (r.ymax - r.ymin));
    let (x0, y0) = (r.xmin - mx, r.ymin - my);
    let (dx, dy) = ((r.xmax - r.xmin + 2.0 * mx) / (n - 1) as f64, (r.ymax - r.ymin + 2.0 * my) / (n - 1) as f64);
    Ok((0..n * n).map(|k| [x0 + (k % n) as f64 * dx, y0 + (k / n) as f64 * dy]).collect())
}

/// Attach the run configuration, write everything and the manifest.
pub(super) fn finish_fit<T: Serialize>(
    command: &str,
    args: &T,
    mut fit: FitResult,
    data: &LoadedData,
    out: &OutputArgs,
    fold: Option<&FoldOptions>,
    extra_inputs: &[&Path],
) -> Result<Status> {
    let config = config_value(command, args)?;
    fit.run_config = Some(config.clone());
    if !fit.converged {
        log::warn!("{command}: fit did not converge");
    }
    let written = write_fit_outputs(&out.out, &fit, &data.ids, out, fold)?;
    let mut manifest = Manifest::new(command, config);
    for p in data.inputs.iter().map(PathBuf::as_path).chain(extra_inputs.iter().copied()) {
        manifest.input(p)?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    if !fit.converged {
        manifest.status = "not-converged".into();
    }
    manifest.write(&out.out)?;
    Ok(Status::from_converged(fit.converged))
}

pub fn fit_aniso(args: &FitAnisoArgs) -> Result<Status> {
    let data = load(&args.data)?;
    let m = moments(&data)?;
    let fit = fit_anisotropic(&data.stations, &m, &args.optimizer.options())?;
    finish_fit("fit-aniso", args, fit, &data, &args.output, None, &[])
}

pub fn fit_deform(args: &FitDeformArgs) -> Result<Status> {
    let data = load(&args.data)?;
    let m = moments(&data)?;
    let mut opts = args.optimizer.options();
    let aniso = aniso_start(args.aniso.as_deref(), &data, &m, &args.optimizer.options())?;
    let fold = fold_options(&args.fold, &args.output, &mut opts);
    let rank = capped_rank(args.rank, data.stations.len());
    let fit = fit_deformation(&data.stations, &m, rank, &aniso, fold.as_ref(), &opts)?;
    let extra: Vec<&Path> = args.aniso.iter().map(PathBuf::as_path).collect();
    finish_fit("fit-deform", args, fit, &data, &args.output, fold.as_ref(), &extra)
}

pub fn fit_dimexp(args: &FitDimexpArgs) -> Result<Status> {
    let data = load(&args.data)?;
    let m = moments(&data)?;
    let opts = args.optimizer.options();
    let aniso = aniso_start(args.aniso.as_deref(), &data, &m, &opts)?;
    let rank = capped_rank(args.rank, data.stations.len());
    let fit = fit_dimension_expansion(&data.stations, &m, args.r, rank, &aniso, &opts)?;
    let extra: Vec<&Path> = args.aniso.iter().map(PathBuf::as_path).collect();
    finish_fit("fit-dimexp", args, fit, &data, &args.output, None, &extra)
}
