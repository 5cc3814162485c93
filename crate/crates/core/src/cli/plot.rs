//! Static SVG figures built from the files a fit command writes.
//!
//! Plots only read those files, so every value drawn can be traced back to
//! a CSV cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::io::{write_atomic, Manifest};
use super::{PlotArgs, Status};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::gplik::CovarianceParams;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const BINS: usize = 15;

/// Linear map from a data box to the plotting area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn covering(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Self {
        Self { x: span(xs), y: span(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn span(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#, f.px(xv), y0 + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"#, x0 - 6.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, HEIGHT - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn close(mut s: String) -> String {
    s.push_str("</svg>\n");
    s
}

/// Equal-width distance bins of `(distance, semivariance)` pairs, as
/// `(mean distance, mean semivariance)`; empty bins are skipped.
pub fn bin_pairs(pairs: &[(f64, f64)], bins: usize) -> Vec<(f64, f64)> {
    let hi = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    if pairs.is_empty() || bins == 0 || hi <= 0.0 {
        return Vec::new();
    }
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for &(d, g) in pairs {
        let k = ((d / hi * bins as f64) as usize).min(bins - 1);
        acc[k].0 += d;
        acc[k].1 += g;
        acc[k].2 += 1;
    }
    acc.into_iter().filter(|a| a.2 > 0).map(|(d, g, c)| (d / c as f64, g / c as f64)).collect()
}

/// Per-pair points, bin means and a single model curve.
pub fn semivariogram_svg(pairs: &[(f64, f64)], params: &CovarianceParams) -> String {
    let bins = bin_pairs(pairs, BINS);
    let dmax = pairs.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let curve: Vec<(f64, f64)> = (0..=100).map(|k| {
        let h = dmax * k as f64 / 100.0;
        (h, params.semivariance(h))
    }).collect();
    let f = Frame::covering(
        pairs.iter().map(|p| p.0).chain([0.0]),
        pairs.iter().map(|p| p.1).chain(curve.iter().map(|c| c.1)).chain([0.0]),
    );
    let mut s = open("Semivariogram");
    axes(&mut s, &f, "D-space distance", "semivariance");
    s.push_str("<g class=\"pairs\" fill=\"#888\">\n");
    for &(d, g) in pairs {
        let _ = writeln!(s, r#"<circle class="pair" cx="{:.2}" cy="{:.2}" r="2"/>"#, f.px(d), f.py(g));
    }
    s.push_str("</g>\n<g class=\"bins\" fill=\"#c0392b\">\n");
    for &(d, g) in &bins {
        let _ = writeln!(s, r#"<circle class="bin" cx="{:.2}" cy="{:.2}" r="4"/>"#, f.px(d), f.py(g));
    }
    s.push_str("</g>\n");
    let mut path = String::new();
    for (k, &(h, g)) in curve.iter().enumerate() {
        let _ = write!(path, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, f.px(h), f.py(g));
    }
    let _ = writeln!(s, r#"<path class="model-curve" d="{}" stroke="black" stroke-width="2" fill="none"/>"#, path.trim_end());
    close(s)
}

/// Grid lines through warped vertices `(i, j, w1, w2)` plus station markers.
pub fn warped_grid_svg(vertices: &[(usize, usize, f64, f64)], stations: &[(f64, f64)]) -> String {
    let nx = vertices.iter().map(|v| v.0).max().map_or(0, |m| m + 1);
    let ny = vertices.iter().map(|v| v.1).max().map_or(0, |m| m + 1);
    let f = Frame::covering(
        vertices.iter().map(|v| v.2).chain(stations.iter().map(|s| s.0)),
        vertices.iter().map(|v| v.3).chain(stations.iter().map(|s| s.1)),
    );
    let mut at = vec![None; nx * ny];
    for v in vertices {
        at[v.1 * nx + v.0] = Some((v.2, v.3));
    }
    let mut s = open("Warped grid");
    axes(&mut s, &f, "w1", "w2");
    s.push_str("<g class=\"grid-lines\" stroke=\"#2c3e50\" stroke-width=\"1\" fill=\"none\">\n");
    let line = |s: &mut String, pts: Vec<(f64, f64)>| {
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline class="grid-line" points="{}"/>"#, coords.join(" "));
    };
    for j in 0..ny {
        line(&mut s, (0..nx).filter_map(|i| at[j * nx + i]).collect());
    }
    for i in 0..nx {
        line(&mut s, (0..ny).filter_map(|j| at[j * nx + i]).collect());
    }
    s.push_str("</g>\n<g class=\"stations\" fill=\"#c0392b\">\n");
    for p in stations {
        let _ = writeln!(s, r#"<circle class="station" cx="{:.2}" cy="{:.2}" r="3"/>"#, f.px(p.0), f.py(p.1));
    }
    s.push_str("</g>\n");
    close(s)
}

fn ramp(t: f64) -> String {
    // blue to yellow through green
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let r = (68.0 + t * (253.0 - 68.0)).round();
    let g = (1.0 + t * (231.0 - 1.0)).round();
    let b = (84.0 + (t * std::f64::consts::PI).sin() * 60.0 - t * 50.0).round().clamp(0.0, 255.0);
    format!("rgb({r},{g},{b})")
}

/// A regular-grid heatmap; `cells` holds `(x, y, text)` with the value as
/// written in the source CSV, which is copied into `data-value`.
pub fn heatmap_svg(title: &str, cells: &[(f64, f64, String)]) -> Result<String> {
    let values: Vec<f64> = cells
        .iter()
        .map(|c| c.2.parse::<f64>().map_err(|_| Error::Data(format!("'{}' is not a number", c.2))))
        .collect::<Result<_>>()?;
    let spacing = |pick: fn(&(f64, f64, String)) -> f64| {
        let mut v: Vec<f64> = cells.iter().map(pick).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    };
    let (dx, dy) = (spacing(|c| c.0), spacing(|c| c.1));
    let (dx, dy) = (if dx.is_finite() { dx } else { 1.0 }, if dy.is_finite() { dy } else { 1.0 });
    let f = Frame::covering(
        cells.iter().flat_map(|c| [c.0 - dx / 2.0, c.0 + dx / 2.0]),
        cells.iter().flat_map(|c| [c.1 - dy / 2.0, c.1 + dy / 2.0]),
    );
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut s = open(title);
    axes(&mut s, &f, "x1", "x2");
    s.push_str("<g class=\"cells\">\n");
    for (c, v) in cells.iter().zip(&values) {
        let (x, y) = (f.px(c.0 - dx / 2.0), f.py(c.1 + dy / 2.0));
        let (w, h) = (f.px(c.0 + dx / 2.0) - x, f.py(c.1 - dy / 2.0) - y);
        let _ = writeln!(
            s,
            r#"<rect class="cell" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}" data-x1="{}" data-x2="{}" data-value="{}"/>"#,
            ramp((v - lo) / range),
            c.0,
            c.1,
            escape(&c.2)
        );
    }
    s.push_str("</g>\n");
    let _ = writeln!(
        s,
        r#"<text class="range" x="{}" y="{}" text-anchor="end" font-size="11">min {} max {}</text>"#,
        WIDTH - MARGIN,
        MARGIN - 8.0,
        tick(lo),
        tick(hi)
    );
    Ok(close(s))
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing input {}", p.display()))));
    }
    Ok(p)
}

fn records(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((h, rows))
}

fn column(h: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    h.iter().position(|c| c == name).ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
}

fn num(s: &str, path: &Path) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Data(format!("{}: '{s}' is not a number", path.display())))
}

/// Write every figure for the fit directory `dir` into `out`; returns the
/// written files.
pub fn plot_fit_dir(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let model_path = require(dir, "model.json")?;
    let sv_path = require(dir, "semivariogram.csv")?;
    let grid_path = require(dir, "warped_grid.csv")?;
    let st_path = require(dir, "warped_stations.csv")?;
    let se_path = require(dir, "se_grid.csv")?;
    let fit = FitResult::from_json(&std::fs::read_to_string(&model_path)?)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let (h, rows) = records(&sv_path)?;
    let (cd, ce) = (column(&h, "distance", &sv_path)?, column(&h, "empirical", &sv_path)?);
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| Ok((num(&r[cd], &sv_path)?, num(&r[ce], &sv_path)?))).collect::<Result<_>>()?;
    let p = out.join("semivariogram.svg");
    write_atomic(&p, semivariogram_svg(&pairs, &fit.covariance()).as_bytes())?;
    written.push(p);

    let (h, rows) = records(&grid_path)?;
    let idx = [column(&h, "i", &grid_path)?, column(&h, "j", &grid_path)?, column(&h, "w1", &grid_path)?, column(&h, "w2", &grid_path)?];
    let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("{}: bad index '{s}'", grid_path.display())));
    let verts: Vec<(usize, usize, f64, f64)> = rows
        .iter()
        .map(|r| Ok((parse_idx(&r[idx[0]])?, parse_idx(&r[idx[1]])?, num(&r[idx[2]], &grid_path)?, num(&r[idx[3]], &grid_path)?)))
        .collect::<Result<_>>()?;
    let (hs, srows) = records(&st_path)?;
    let (s1, s2) = (column(&hs, "w1", &st_path)?, column(&hs, "w2", &st_path)?);
    let stations: Vec<(f64, f64)> = srows.iter().map(|r| Ok((num(&r[s1], &st_path)?, num(&r[s2], &st_path)?))).collect::<Result<_>>()?;
    let p = out.join("warped_grid.svg");
    write_atomic(&p, warped_grid_svg(&verts, &stations).as_bytes())?;
    written.push(p);

    // added dimensions of a dimension-expansion fit
    let (cx1, cx2) = (column(&h, "x1", &grid_path)?, column(&h, "x2", &grid_path)?);
    for d in 3..=fit.model.output_dim() {
        let c = column(&h, &format!("w{d}"), &grid_path)?;
        let cells: Vec<(f64, f64, String)> =
            rows.iter().map(|r| Ok((num(&r[cx1], &grid_path)?, num(&r[cx2], &grid_path)?, r[c].to_string()))).collect::<Result<_>>()?;
        let p = out.join(format!("added_dim_{}.svg", d - 2));
        write_atomic(&p, heatmap_svg(&format!("Added dimension {}", d - 2), &cells)?.as_bytes())?;
        written.push(p);
    }

    let (h, rows) = records(&se_path)?;
    let (c1, c2, cd, cs) = (column(&h, "x1", &se_path)?, column(&h, "x2", &se_path)?, column(&h, "dim", &se_path)?, column(&h, "se", &se_path)?);
    let dims: std::collections::BTreeSet<String> = rows.iter().map(|r| r[cd].to_string()).collect();
    for dim in dims {
        let cells: Vec<(f64, f64, String)> = rows
            .iter()
            .filter(|r| r[cd] == *dim)
            .map(|r| Ok((num(&r[c1], &se_path)?, num(&r[c2], &se_path)?, r[cs].to_string())))
            .collect::<Result<_>>()?;
        let p = out.join(format!("se_dim_{dim}.svg"));
        write_atomic(&p, heatmap_svg(&format!("Standard error of warped coordinate {dim}"), &cells)?.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

pub fn plot(args: &PlotArgs) -> Result<Status> {
    let out = args.out.clone().unwrap_or_else(|| args.fit.clone());
    let written = plot_fit_dir(&args.fit, &out)?;
    let mut manifest = Manifest::new("plot", serde_json::json!({ "command": "plot", "args": serde_json::to_value(args)? }));
    for name in ["model.json", "semivariogram.csv", "warped_grid.csv", "warped_stations.csv", "se_grid.csv"] {
        manifest.input(&args.fit.join(name))?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    // keep the fit manifest intact when plotting into the fit directory
    let path = out.join("plot_manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Status::Ok)
}
