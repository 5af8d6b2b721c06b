use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{parse_plt, Dataset, PltParse};
use crate::error::{Error, Result};

const MAX_ERROR_SAMPLES: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Summary of a [`load_dataset`] run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub root: PathBuf,
    pub layout: String,
    pub users: usize,
    pub files_parsed: usize,
    pub points: usize,
    pub record_errors: usize,
    pub record_error_samples: Vec<String>,
    pub dropped_out_of_range: usize,
    pub skipped_files: Vec<SkippedFile>,
    pub warnings: Vec<String>,
}

fn is_plt(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("plt"))
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<user>/Trajectory/*.plt` (GeoLife layout) and/or a flat
/// directory of `<user>.plt` files.
pub fn load_dataset(root: &Path) -> Result<(Dataset, LoadReport)> {
    let entries = sorted_entries(root).map_err(|e| Error::io(root, e))?;
    let mut report = LoadReport {
        root: root.to_path_buf(),
        ..Default::default()
    };

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    let (mut nested, mut flat) = (false, false);
    for entry in &entries {
        let traj_dir = entry.join("Trajectory");
        if traj_dir.is_dir() {
            nested = true;
            let user = entry
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            match sorted_entries(&traj_dir) {
                Ok(list) => files.extend(list.into_iter().filter(|p| is_plt(p)).map(|p| (user.clone(), p))),
                Err(e) => report.skipped_files.push(SkippedFile {
                    path: traj_dir,
                    reason: e.to_string(),
                }),
            }
        } else if is_plt(entry) {
            flat = true;
            let user = entry
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push((user, entry.clone()));
        }
    }
    report.layout = match (nested, flat) {
        (true, false) => "geolife",
        (false, true) => "flat",
        (true, true) => "mixed",
        (false, false) => "empty",
    }
    .to_string();

    let parsed: Vec<(String, PathBuf, Result<PltParse>)> = files
        .into_par_iter()
        .map(|(user, path)| {
            let res = fs::File::open(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|f| parse_plt(BufReader::new(f), &user));
            (user, path, res)
        })
        .collect();

    let mut ds = Dataset::new(root.display().to_string());
    for (_user, path, res) in parsed {
        match res {
            Ok(p) => {
                report.files_parsed += 1;
                report.dropped_out_of_range += p.dropped_out_of_range;
                report.record_errors += p.record_errors.len();
                for e in p.record_errors {
                    if report.record_error_samples.len() < MAX_ERROR_SAMPLES {
                        report
                            .record_error_samples
                            .push(format!("{}: {e}", path.display()));
                    }
                }
                ds.insert(p.trajectory);
            }
            Err(e) => report.skipped_files.push(SkippedFile {
                path,
                reason: e.to_string(),
            }),
        }
    }

    report.users = ds.n_users();
    report.points = ds.n_points();
    if ds.is_empty() {
        report
            .warnings
            .push(format!("no trajectories found under {}", root.display()));
    }
    Ok((ds, report))
}
