use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{format_iso, parse_iso, Dataset, GpsPoint, Trajectory};
use crate::error::{Error, Result};

pub const GPS_TSV_HEADER: &str = "user_id\ttimestamp\tlat\tlon\talt_m";

/// Reads a tab-separated file with a fixed header, calling `row` for each
/// data line with its 1-based line number and fields.
pub(crate) fn read_table<F>(path: &Path, kind: &'static str, header: &str, mut row: F) -> Result<()>
where
    F: FnMut(usize, &[&str]) -> std::result::Result<(), String>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        kind,
        path: path.to_path_buf(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end_matches('\r') == header => {}
        Some(Ok(h)) => return Err(bad(format!("unexpected header `{h}`"))),
        Some(Err(e)) => return Err(Error::io(path, e)),
        None => return Err(bad("missing header".into())),
    }
    let width = header.split('\t').count();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let line_no = i + 2;
        if fields.len() != width {
            return Err(bad(format!(
                "line {line_no}: expected {width} columns, found {}",
                fields.len()
            )));
        }
        row(line_no, &fields).map_err(|m| bad(format!("line {line_no}: {m}")))?;
    }
    Ok(())
}

pub(crate) fn field<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("bad {name} `{s}`"))
}

pub(crate) fn time_field(s: &str) -> std::result::Result<i64, String> {
    parse_iso(s).map_err(|e| e.to_string())
}

pub fn write_gps_point<W: Write>(w: &mut W, user_id: &str, p: &GpsPoint) -> std::io::Result<()> {
    write!(w, "{user_id}\t{}\t{}\t{}\t", format_iso(p.timestamp), p.lat, p.lon)?;
    match p.altitude {
        Some(a) => writeln!(w, "{a}"),
        None => writeln!(w),
    }
}

/// Writes the header and every point; returns the number of data rows.
pub fn write_gps_tsv<'a, W, I>(w: &mut W, trajectories: I) -> std::io::Result<usize>
where
    W: Write,
    I: IntoIterator<Item = &'a Trajectory>,
{
    writeln!(w, "{GPS_TSV_HEADER}")?;
    let mut n = 0;
    for t in trajectories {
        for p in t.points() {
            write_gps_point(w, t.user_id(), p)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn read_gps_tsv(path: &Path) -> Result<Dataset> {
    let mut users: Vec<(String, Vec<GpsPoint>)> = Vec::new();
    read_table(path, "GPS TSV", GPS_TSV_HEADER, |_, f| {
        let altitude = if f[4].is_empty() {
            None
        } else {
            Some(field::<f64>(f[4], "altitude")?)
        };
        let p = GpsPoint::new(field(f[2], "lat")?, field(f[3], "lon")?, time_field(f[1])?, altitude)
            .map_err(|e| e.to_string())?;
        match users.last_mut() {
            Some((u, pts)) if u == f[0] => pts.push(p),
            _ => users.push((f[0].to_string(), vec![p])),
        }
        Ok(())
    })?;
    let mut ds: Dataset = users.into_iter().map(|(u, pts)| Trajectory::new(u, pts)).collect();
    ds.provenance = path.display().to_string();
    Ok(ds)
}
