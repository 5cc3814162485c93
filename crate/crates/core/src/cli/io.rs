//! File formats: wide station CSVs, station metadata, grids, atomic
//! writes and run manifests.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extremes::StationData;
use crate::sim::SimGrid;
use crate::tiling::Point2;

const TIME_COLUMNS: [&str; 4] = ["time", "date", "day", "t"];

/// Station metadata: id, location and named numeric covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct StationTable {
    pub ids: Vec<String>,
    pub locations: Vec<Point2>,
    pub covariates: Vec<(String, Vec<f64>)>,
}

impl StationTable {
    pub fn covariate(&self, name: &str) -> Result<Vec<f64>> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Data(format!("station file has no covariate column '{name}'")))
    }
}

fn parse_cell(s: &str, what: &str) -> Result<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| Error::Data(format!("cannot parse '{t}' as a number in {what}")))
}

fn column_index(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

/// Read `id,lon,lat[,covariates...]`. `x1`/`x2` are accepted for planar
/// coordinates.
pub fn read_stations(path: &Path) -> Result<StationTable> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let what = path.display().to_string();
    let id = column_index(&headers, &["id", "station"]).ok_or_else(|| Error::Data(format!("{what}: missing 'id' column")))?;
    let lon = column_index(&headers, &["lon", "longitude", "x1", "x"]).ok_or_else(|| Error::Data(format!("{what}: missing 'lon' column")))?;
    let lat = column_index(&headers, &["lat", "latitude", "x2", "y"]).ok_or_else(|| Error::Data(format!("{what}: missing 'lat' column")))?;
    let extra: Vec<usize> = (0..headers.len()).filter(|c| ![id, lon, lat].contains(c)).collect();
    let mut table = StationTable {
        ids: Vec::new(),
        locations: Vec::new(),
        covariates: extra.iter().map(|&c| (headers[c].trim().to_string(), Vec::new())).collect(),
    };
    for rec in r.records() {
        let rec = rec?;
        table.ids.push(rec[id].trim().to_string());
        let p = [parse_cell(&rec[lon], &what)?, parse_cell(&rec[lat], &what)?];
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Data(format!("{what}: station '{}' has no location", rec[id].trim())));
        }
        table.locations.push(p);
        for (k, &c) in extra.iter().enumerate() {
            table.covariates[k].1.push(parse_cell(&rec[c], &what)?);
        }
    }
    if table.ids.is_empty() {
        return Err(Error::Data(format!("{what}: no stations")));
    }
    Ok(table)
}

/// A wide table: optional time labels and one column per station id.
#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub times: Option<Vec<String>>,
    pub ids: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_wide(path: &Path) -> Result<WideTable> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let what = path.display().to_string();
    let time = column_index(&headers, &TIME_COLUMNS);
    let cols: Vec<usize> = (0..headers.len()).filter(|c| Some(*c) != time).collect();
    if cols.is_empty() {
        return Err(Error::Data(format!("{what}: no station columns")));
    }
    let ids: Vec<String> = cols.iter().map(|&c| headers[c].trim().to_string()).collect();
    let mut times = time.map(|_| Vec::new());
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0;
    for rec in r.records() {
        let rec = rec?;
        if let (Some(ts), Some(c)) = (times.as_mut(), time) {
            ts.push(rec[c].trim().to_string());
        }
        for &c in &cols {
            rows.push(parse_cell(rec.get(c).unwrap_or(""), &what)?);
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Data(format!("{what}: no data rows")));
    }
    Ok(WideTable { times, ids, values: DMatrix::from_row_slice(t, cols.len(), &rows) })
}

/// Join a wide table with station metadata by id, in data-column order.
pub fn station_data(wide: &WideTable, stations: &StationTable, covariate: Option<&str>) -> Result<StationData> {
    let index: HashMap<&str, usize> = stations.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut locs = Vec::with_capacity(wide.ids.len());
    let mut rows = Vec::with_capacity(wide.ids.len());
    for id in &wide.ids {
        let &i = index.get(id.as_str()).ok_or_else(|| Error::Data(format!("data column '{id}' has no station metadata")))?;
        locs.push(stations.locations[i]);
        rows.push(i);
    }
    let cov = match covariate {
        Some(name) => {
            let all = stations.covariate(name)?;
            let v: Vec<f64> = rows.iter().map(|&i| all[i]).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("covariate '{name}' is missing for some stations")));
            }
            Some(v)
        }
        None => None,
    };
    StationData::new(wide.values.clone(), locs, cov)?.with_ids(wide.ids.clone())
}

/// Read a grid file `lon,lat[,area][,covariate]`; areas default to the
/// equirectangular cell area of the regular spacing when absent.
pub fn read_grid(path: &Path, covariate: Option<&str>) -> Result<SimGrid> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let what = path.display().to_string();
    let lon = column_index(&headers, &["lon", "longitude", "x1", "x"]).ok_or_else(|| Error::Data(format!("{what}: missing 'lon' column")))?;
    let lat = column_index(&headers, &["lat", "latitude", "x2", "y"]).ok_or_else(|| Error::Data(format!("{what}: missing 'lat' column")))?;
    let area = column_index(&headers, &["area", "area_km2"]);
    let cov = match covariate {
        Some(n) => Some(column_index(&headers, &[n]).ok_or_else(|| Error::Data(format!("{what}: missing covariate column '{n}'")))?),
        None => None,
    };
    let (mut pts, mut areas, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        pts.push([parse_cell(&rec[lon], &what)?, parse_cell(&rec[lat], &what)?]);
        if let Some(a) = area {
            areas.push(parse_cell(&rec[a], &what)?);
        }
        if let Some(c) = cov {
            covs.push(parse_cell(&rec[c], &what)?);
        }
    }
    if pts.is_empty() {
        return Err(Error::Data(format!("{what}: empty grid")));
    }
    if area.is_none() {
        areas = spacing_areas(&pts);
    }
    SimGrid::new(pts, areas, cov.map(|_| covs))
}

/// Cell areas from the smallest positive spacing along each axis.
fn spacing_areas(pts: &[Point2]) -> Vec<f64> {
    let spacing = |k: usize| {
        let mut v: Vec<f64> = pts.iter().map(|p| p[k]).collect();
        v.sort_by(f64::total_cmp);
        v.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 1e-12).fold(f64::INFINITY, f64::min)
    };
    let (dx, dy) = (spacing(0), spacing(1));
    let (dx, dy) = (if dx.is_finite() { dx } else { 1.0 }, if dy.is_finite() { dy } else { 1.0 });
    pts.iter().map(|p| crate::sim::cell_area_km2(dx, dy, p[1])).collect()
}

pub fn write_wide<W: Write>(out: W, ids: &[String], values: &DMatrix<f64>, times: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = Vec::new();
    if times.is_some() {
        header.push("time".into());
    }
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for r in 0..values.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = times {
            rec.push(ts[r].clone());
        }
        rec.extend(values.row(r).iter().map(|v| if v.is_finite() { v.to_string() } else { String::new() }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stations<W: Write>(out: W, ids: &[String], locations: &[Point2], covariate: Option<(&str, &[f64])>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "lon".into(), "lat".into()];
    if let Some((name, _)) = covariate {
        header.push(name.into());
    }
    w.write_record(&header)?;
    for (i, (id, p)) in ids.iter().zip(locations).enumerate() {
        let mut rec = vec![id.clone(), p[0].to_string(), p[1].to_string()];
        if let Some((_, v)) = covariate {
            rec.push(v[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialize CSV output into memory, then write it atomically.
pub fn write_csv_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

thread_local! {
    static INVOCATION: RefCell<Vec<String>> = const { RefCell::new(Vec::new()) };
}

/// Remember the command line being executed so manifests can record it.
pub(crate) fn set_invocation(argv: Vec<String>) {
    INVOCATION.with(|v| *v.borrow_mut() = argv);
}

/// Resolved configuration, inputs and outputs of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub library_version: String,
    pub command: String,
    /// Command line that produced the outputs; replaying it through
    /// [`crate::cli::run`] reproduces them.
    #[serde(default)]
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub status: String,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: crate::fit::SCHEMA_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            argv: INVOCATION.with(|v| v.borrow().clone()),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "ok".into(),
        }
    }

    fn digest(path: &Path) -> Result<FileDigest> {
        Ok(FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Self::digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Self::digest(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_and_station_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["a".to_string(), "b".into()];
        let vals = DMatrix::from_row_slice(3, 2, &[1.0, f64::NAN, 0.5, 2.0, 0.0, 3.25]);
        let times = vec!["2020-04-01".to_string(), "2020-04-02".into(), "2020-04-03".into()];
        let wp = dir.path().join("data.csv");
        write_csv_atomic(&wp, |b| write_wide(b, &ids, &vals, Some(&times))).unwrap();
        let sp = dir.path().join("stations.csv");
        write_csv_atomic(&sp, |b| write_stations(b, &ids, &[[0.0, 1.0], [2.0, 3.0]], Some(("elev", &[10.0, 20.0])))).unwrap();
        let wide = read_wide(&wp).unwrap();
        assert_eq!(wide.times.as_deref(), Some(times.as_slice()));
        assert!(wide.values[(0, 1)].is_nan());
        assert_eq!(wide.values[(2, 1)], 3.25);
        let st = read_stations(&sp).unwrap();
        let data = station_data(&wide, &st, Some("elev")).unwrap();
        assert_eq!(data.covariate, Some(vec![10.0, 20.0]));
        assert_eq!(data.stations[1], [2.0, 3.0]);
        assert!(station_data(&wide, &st, Some("slope")).is_err());
    }

    #[test]
    fn unknown_station_column_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("data.csv");
        fs::write(&wp, "time,a,z\n1,1,2\n").unwrap();
        let sp = dir.path().join("stations.csv");
        fs::write(&sp, "id,lon,lat\na,0,0\n").unwrap();
        let r = station_data(&read_wide(&wp).unwrap(), &read_stations(&sp).unwrap(), None);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
