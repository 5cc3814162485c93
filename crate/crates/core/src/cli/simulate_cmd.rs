//! simulate: event catalog, losses and the top events.

use std::path::PathBuf;

use super::io::{self, write_csv_atomic, Manifest};
use super::{SimulateArgs, Status};
use crate::error::{Error, Result};
use crate::extremes::MarginalModel;
use crate::fit::FitResult;
use crate::sim::{rank_events, simulate_catalog, SimGrid, SimOptions};
use crate::tiling::Rect;

fn event_count(args: &SimulateArgs) -> Result<usize> {
    match (args.count, args.years) {
        (Some(c), None) => Ok(c),
        (None, Some(y)) => Ok(y * args.days_per_year),
        (None, None) => Err(Error::InvalidConfig("give --count or --years".into())),
        (Some(_), Some(_)) => Err(Error::InvalidConfig("--count and --years are exclusive".into())),
    }
}

pub fn simulate(args: &SimulateArgs) -> Result<Status> {
    let fit = FitResult::from_json(&std::fs::read_to_string(&args.model)?)?;
    let marginal = MarginalModel::from_json(&std::fs::read_to_string(&args.marginal)?)?;
    let grid = match &args.grid {
        Some(p) => io::read_grid(p, args.covariate.as_deref())?,
        None if marginal.uses_covariate() => {
            return Err(Error::InvalidConfig("the marginal model uses a covariate; pass --grid and --covariate".into()));
        }
        None => SimGrid::regular(Rect::bounding(&marginal.stations)?, args.nx, args.ny)?,
    };
    let opts = SimOptions { count: event_count(args)?, seed: args.seed, max_points: args.max_points };
    let catalog = simulate_catalog(&fit, &marginal, &grid, &opts)?;
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();

    let gp = out.join("grid.csv");
    write_csv_atomic(&gp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["cell", "lon", "lat", "area_km2"])?;
        for (c, (p, a)) in grid.points.iter().zip(&grid.areas).enumerate() {
            w.write_record([c.to_string(), p[0].to_string(), p[1].to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(gp);

    let cp = out.join("catalog.csv");
    write_csv_atomic(&cp, |buf| catalog.write_long_csv(buf))?;
    written.push(cp);
    let lp = out.join("losses.csv");
    write_csv_atomic(&lp, |buf| catalog.write_summary_csv(buf))?;
    written.push(lp);

    let top = rank_events(&catalog, args.top_k);
    let mut refs = Vec::with_capacity(top.len());
    for e in &top {
        let rel = format!("events/event_{}.csv", e.index);
        let p = out.join(&rel);
        write_csv_atomic(&p, |buf| catalog.write_event_csv(e, buf))?;
        written.push(p);
        refs.push(rel);
    }
    let tp = out.join("top_events.csv");
    write_csv_atomic(&tp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["rank", "event", "loss", "exceeding_cells", "field_csv"])?;
        for (k, (e, r)) in top.iter().zip(&refs).enumerate() {
            w.write_record([(k + 1).to_string(), e.index.to_string(), e.loss.to_string(), e.exceeding_cells().to_string(), r.clone()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    written.push(tp);

    let config = serde_json::json!({
        "command": "simulate",
        "args": serde_json::to_value(args)?,
        "events": opts.count,
        "cells": grid.len(),
    });
    let mut manifest = Manifest::new("simulate", config);
    manifest.input(&args.model)?;
    manifest.input(&args.marginal)?;
    if let Some(g) = &args.grid {
        manifest.input(g)?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    manifest.write(out)?;
    Ok(Status::Ok)
}
