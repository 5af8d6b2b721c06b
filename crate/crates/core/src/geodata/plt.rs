//! GeoLife `.plt` files: six header lines, then
//! `lat,lon,0,altitude_ft,days_since_1899-12-30,YYYY-MM-DD,HH:MM:SS`.

use std::fmt::Write as _;
use std::io::BufRead;

use chrono::NaiveDateTime;

use super::{check_timestamp, lat_lon_in_range, GpsPoint, Trajectory};
use crate::error::{Error, Result};

const HEADER_LINES: usize = 6;
const FEET_TO_METERS: f64 = 0.3048;
const MISSING_ALTITUDE_FT: f64 = -777.0;
/// Days between 1899-12-30 and 1970-01-01.
const SERIAL_DAY_EPOCH_OFFSET: f64 = 25_569.0;

const HEADER: &str = "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved 3\n0,2,255,My Track,0,0,2,8421376\n0\n";

/// Result of parsing one PLT file. Malformed records do not abort the file;
/// they are collected in `record_errors`.
#[derive(Debug)]
pub struct PltParse {
    pub trajectory: Trajectory,
    pub record_errors: Vec<Error>,
    pub dropped_out_of_range: usize,
}

pub fn parse_plt<R: BufRead>(reader: R, user_id: &str) -> Result<PltParse> {
    let mut points = Vec::new();
    let mut record_errors = Vec::new();
    let mut dropped_out_of_range = 0;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<plt:{user_id}>"), e))?;
        if idx < HEADER_LINES {
            continue;
        }
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_record(trimmed, line_no) {
            Ok(Some(p)) => points.push(p),
            Ok(None) => dropped_out_of_range += 1,
            Err(e) => record_errors.push(e),
        }
    }

    if points.is_empty() {
        return Err(Error::EmptyTrajectory {
            user_id: user_id.to_string(),
        });
    }
    Ok(PltParse {
        trajectory: Trajectory::new(user_id, points),
        record_errors,
        dropped_out_of_range,
    })
}

/// `Ok(None)` means the record parsed but lies outside valid lat/lon ranges.
fn parse_record(line: &str, line_no: usize) -> Result<Option<GpsPoint>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 7 {
        return Err(Error::Record {
            line: line_no,
            message: format!("expected 7 fields, found {}", fields.len()),
        });
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Record {
                line: line_no,
                message: format!("malformed {name} `{}`", fields[i]),
            })
    };
    let lat = num(0, "latitude")?;
    let lon = num(1, "longitude")?;
    let alt_ft = num(3, "altitude")?;
    num(4, "serial day")?;

    let stamp = format!("{} {}", fields[5], fields[6]);
    let timestamp = NaiveDateTime::parse_from_str(&stamp, "%Y-%m-%d %H:%M:%S")
        .map_err(|e| Error::Record {
            line: line_no,
            message: format!("malformed date/time `{stamp}`: {e}"),
        })?
        .and_utc()
        .timestamp();
    check_timestamp(timestamp).map_err(|e| Error::Record {
        line: line_no,
        message: e.to_string(),
    })?;

    if !lat_lon_in_range(lat, lon) {
        return Ok(None);
    }
    let altitude = (alt_ft != MISSING_ALTITUDE_FT).then(|| alt_ft * FEET_TO_METERS);
    Ok(Some(GpsPoint {
        lat,
        lon,
        timestamp,
        altitude,
    }))
}

/// Serializes a trajectory in PLT layout with a standard GeoLife header.
pub fn write_plt(t: &Trajectory) -> String {
    let mut out = String::with_capacity(HEADER.len() + t.len() * 64);
    out.push_str(HEADER);
    for p in t.points() {
        let alt_ft = p.altitude.map_or(MISSING_ALTITUDE_FT, |m| m / FEET_TO_METERS);
        let days = p.timestamp as f64 / 86_400.0 + SERIAL_DAY_EPOCH_OFFSET;
        let dt = chrono::DateTime::from_timestamp(p.timestamp, 0).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},0,{},{},{}",
            p.lat,
            p.lon,
            alt_ft,
            days,
            dt.format("%Y-%m-%d,%H:%M:%S")
        );
    }
    out
}
