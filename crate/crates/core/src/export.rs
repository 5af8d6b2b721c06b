//! Dataset directories, comparison tables and GeoJSON.
//!
//! A dataset directory holds fixed-name files: `staypoints.tsv`,
//! `trips.tsv`, optionally `gps.tsv` and `run_meta.json`, and a
//! `report.json` whose counts are taken from the rows actually written.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geodata::{format_iso, write_gps_point, write_gps_tsv, Dataset, GPS_TSV_HEADER};
use crate::metrics::{similarity, MetricSet};
use crate::simulate::{rng, AgentTrack, RunMeta};
use crate::staypoints::{derive_trips, group_by_user, write_staypoints_tsv, write_trips_tsv, StayPoint};

pub const STAYPOINTS_FILE: &str = "staypoints.tsv";
pub const TRIPS_FILE: &str = "trips.tsv";
pub const GPS_FILE: &str = "gps.tsv";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const REPORT_FILE: &str = "report.json";
pub const GEOJSON_FILE: &str = "staypoints.geojson";

const STREAM_EXPORT: u64 = 4;

/// Which files [`write_dataset`] emits. The report is always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formats {
    pub staypoints: bool,
    pub trips: bool,
    pub gps: bool,
    pub run_meta: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            staypoints: true,
            trips: true,
            gps: true,
            run_meta: true,
        }
    }
}

/// GPS fixes to emit, either simulator tracks or a loaded dataset.
#[derive(Debug, Clone, Copy)]
pub enum GpsSource<'a> {
    None,
    Tracks(&'a [AgentTrack]),
    Dataset(&'a Dataset),
}

/// Everything a dataset directory is built from.
#[derive(Debug, Clone)]
pub struct Products<'a> {
    pub label: String,
    /// grouped by user, each user's records in time order
    pub staypoints: &'a [StayPoint],
    pub gps: GpsSource<'a>,
    pub run_meta: Option<&'a RunMeta>,
    pub metrics: Option<MetricSet>,
    pub target: Option<MetricSet>,
    /// time spent producing the data, excluding the write itself
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub label: String,
    pub n_users: usize,
    pub n_staypoints: usize,
    pub n_trips: usize,
    pub n_gps: usize,
    /// file name → size, for every emitted file except the report
    pub bytes: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    pub write_seconds: f64,
    pub metrics: Option<MetricSet>,
    pub score: Option<f64>,
}

/// Removes files created so far unless disarmed.
struct Cleanup {
    created: Vec<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn write_file<F>(path: &Path, cleanup: &mut Cleanup, body: F) -> Result<usize>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<usize>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    cleanup.created.push(path.to_path_buf());
    let mut w = BufWriter::new(file);
    let n = body(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

fn write_tracks<W: Write>(w: &mut W, tracks: &[AgentTrack]) -> std::io::Result<usize> {
    writeln!(w, "{GPS_TSV_HEADER}")?;
    let mut n = 0;
    for t in tracks {
        for p in t.points() {
            write_gps_point(w, &t.user_id, &p)?;
            n += 1;
        }
    }
    Ok(n)
}

/// Writes the selected files into `dir` (created if needed) and returns
/// the report, which is also saved as `report.json`. On error every file
/// created by this call is removed.
pub fn write_dataset(products: &Products<'_>, dir: &Path, formats: Formats) -> Result<DatasetReport> {
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cleanup = Cleanup {
        created: Vec::new(),
        armed: true,
    };
    let mut users: BTreeSet<&str> = products.staypoints.iter().map(|s| s.user_id.as_str()).collect();

    let mut n_staypoints = 0;
    if formats.staypoints {
        n_staypoints = write_file(&dir.join(STAYPOINTS_FILE), &mut cleanup, |w| {
            write_staypoints_tsv(w, products.staypoints)
        })?;
    }
    let mut n_trips = 0;
    if formats.trips {
        let trips: Vec<_> = group_by_user(products.staypoints)
            .values()
            .flat_map(|sps| derive_trips(sps))
            .collect();
        n_trips = write_file(&dir.join(TRIPS_FILE), &mut cleanup, |w| write_trips_tsv(w, &trips))?;
    }
    let mut n_gps = 0;
    if formats.gps {
        let path = dir.join(GPS_FILE);
        match products.gps {
            GpsSource::None => {}
            GpsSource::Tracks(tracks) => {
                users.extend(tracks.iter().map(|t| t.user_id.as_str()));
                n_gps = write_file(&path, &mut cleanup, |w| write_tracks(w, tracks))?;
            }
            GpsSource::Dataset(ds) => {
                users.extend(ds.user_ids());
                n_gps = write_file(&path, &mut cleanup, |w| write_gps_tsv(w, ds.trajectories()))?;
            }
        }
    }
    if formats.run_meta {
        if let Some(meta) = products.run_meta {
            let text = serde_json::to_string_pretty(meta)?;
            write_file(&dir.join(RUN_META_FILE), &mut cleanup, |w| {
                writeln!(w, "{text}").map(|_| 0)
            })?;
        }
    }

    let mut bytes = BTreeMap::new();
    for p in &cleanup.created {
        let len = fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        bytes.insert(name, len);
    }
    let score = match (&products.target, &products.metrics) {
        (Some(t), Some(m)) => Some(similarity(t, m)?.value()),
        _ => None,
    };
    let report = DatasetReport {
        label: products.label.clone(),
        n_users: users.len(),
        n_staypoints,
        n_trips,
        n_gps,
        bytes,
        wall_clock_seconds: products.wall_clock_seconds,
        write_seconds: started.elapsed().as_secs_f64(),
        metrics: products.metrics,
        score,
    };
    let text = serde_json::to_string_pretty(&report)?;
    write_file(&dir.join(REPORT_FILE), &mut cleanup, |w| writeln!(w, "{text}").map(|_| 0))?;
    cleanup.armed = false;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<DatasetReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "dataset report",
        path: path.clone(),
        message: e.to_string(),
    })
}

/// Writes `staypoints.geojson` into `dir`: a FeatureCollection of Point
/// features, uniformly subsampled to at most `max_points` with `seed`.
pub fn write_geojson(staypoints: &[StayPoint], dir: &Path, max_points: usize, seed: u64) -> Result<PathBuf> {
    let chosen: Vec<usize> = if staypoints.len() <= max_points {
        (0..staypoints.len()).collect()
    } else {
        let mut idx = index::sample(&mut rng(seed, STREAM_EXPORT), staypoints.len(), max_points).into_vec();
        idx.sort_unstable();
        idx
    };
    let features: Vec<_> = chosen
        .iter()
        .map(|&i| {
            let s = &staypoints[i];
            json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [s.lon, s.lat] },
                "properties": {
                    "user_id": s.user_id,
                    "arrive": format_iso(s.arrive),
                    "depart": format_iso(s.depart),
                    "duration_s": s.duration(),
                    "n_points": s.n_points,
                },
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "features": features });
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(GEOJSON_FILE);
    let mut cleanup = Cleanup {
        created: Vec::new(),
        armed: true,
    };
    write_file(&path, &mut cleanup, |w| {
        serde_json::to_writer(&mut *w, &doc)?;
        writeln!(w).map(|_| 0)
    })?;
    cleanup.armed = false;
    Ok(path)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub metrics: Option<MetricSet>,
}

impl From<&DatasetReport> for TableRow {
    fn from(r: &DatasetReport) -> Self {
        Self {
            label: r.label.clone(),
            metrics: r.metrics,
        }
    }
}

/// Renders the table: target first with score 1, then `rows` in the
/// order given. Rows without metrics show `n/a`.
pub fn comparison_table(target_label: &str, target: &MetricSet, rows: &[TableRow], tsv: bool) -> Result<String> {
    let mut lines: Vec<[String; 6]> = Vec::with_capacity(rows.len() + 1);
    let cells = |label: &str, m: Option<&MetricSet>| -> Result<[String; 6]> {
        Ok(match m {
            Some(m) => [
                label.to_string(),
                format!("{:.2}", m.adt),
                format!("{:.2}", m.ada),
                format!("{:.2}", m.mxd),
                format!("{:.2}", m.mdd),
                format!("{:.4}", similarity(target, m)?.value()),
            ],
            None => [label.to_string(), "n/a".into(), "n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()],
        })
    };
    lines.push(cells(target_label, Some(target))?);
    for r in rows {
        lines.push(cells(&r.label, r.metrics.as_ref())?);
    }
    let header = ["Dataset", "ADT", "ADA", "MXD", "MDD", "Score"];
    let mut out = String::new();
    if tsv {
        writeln!(out, "{}", header.join("\t")).unwrap();
        for l in &lines {
            writeln!(out, "{}", l.join("\t")).unwrap();
        }
    } else {
        writeln!(out, "| {} |", header.join(" | ")).unwrap();
        writeln!(out, "|---|---:|---:|---:|---:|---:|").unwrap();
        for l in &lines {
            writeln!(out, "| {} |", l.join(" | ")).unwrap();
        }
    }
    Ok(out)
}

/// Writes [`comparison_table`] to `path`; a `.tsv` extension selects
/// tab-separated output, anything else a markdown table.
pub fn write_comparison_table(target_label: &str, target: &MetricSet, rows: &[TableRow], path: &Path) -> Result<PathBuf> {
    let tsv = path.extension().is_some_and(|e| e == "tsv");
    let text = comparison_table(target_label, target, rows, tsv)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
