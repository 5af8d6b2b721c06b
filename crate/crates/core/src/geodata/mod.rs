//! GPS trajectory data: points, per-user trajectories, datasets, spatial
//! filtering and great-circle distance.

mod load;
mod plt;
pub(crate) mod tsv;

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use load::{load_dataset, LoadReport, SkippedFile};
pub use plt::{parse_plt, write_plt, PltParse};
pub use tsv::{read_gps_tsv, write_gps_point, write_gps_tsv, GPS_TSV_HEADER};

/// Mean Earth radius used for every distance in this crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// 1970-01-01T00:00:00Z.
pub const MIN_TIMESTAMP: i64 = 0;
/// 2101-01-01T00:00:00Z (exclusive).
pub const MAX_TIMESTAMP: i64 = 4_133_980_800;

/// Anything with a WGS84 position.
pub trait Coord {
    fn lat(&self) -> f64;
    fn lon(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

impl Coord for LatLon {
    fn lat(&self) -> f64 {
        self.lat
    }
    fn lon(&self) -> f64 {
        self.lon
    }
}

/// A single timestamped GPS fix. Timestamps are UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub altitude: Option<f64>,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64, timestamp: i64, altitude: Option<f64>) -> Result<Self> {
        check_lat_lon(lat, lon)?;
        check_timestamp(timestamp)?;
        Ok(Self {
            lat,
            lon,
            timestamp,
            altitude,
        })
    }
}

impl Coord for GpsPoint {
    fn lat(&self) -> f64 {
        self.lat
    }
    fn lon(&self) -> f64 {
        self.lon
    }
}

pub(crate) fn lat_lon_in_range(lat: f64, lon: f64) -> bool {
    (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

pub(crate) fn check_lat_lon(lat: f64, lon: f64) -> Result<()> {
    if lat_lon_in_range(lat, lon) {
        Ok(())
    } else {
        Err(Error::InvalidCoordinate(format!("({lat}, {lon}) out of range")))
    }
}

pub(crate) fn check_timestamp(ts: i64) -> Result<()> {
    if (MIN_TIMESTAMP..MAX_TIMESTAMP).contains(&ts) {
        Ok(())
    } else {
        Err(Error::InvalidCoordinate(format!(
            "timestamp {ts} outside 1970-2100"
        )))
    }
}

/// All fixes of one user, sorted by timestamp. Equal timestamps keep their
/// input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    user_id: String,
    points: Vec<GpsPoint>,
}

impl Trajectory {
    pub fn new(user_id: impl Into<String>, mut points: Vec<GpsPoint>) -> Self {
        // stable: duplicates stay in file order
        points.sort_by_key(|p| p.timestamp);
        Self {
            user_id: user_id.into(),
            points,
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn points(&self) -> &[GpsPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<GpsPoint> {
        self.points
    }

    /// Appends `other`'s points and restores time order.
    pub fn merge(&mut self, other: Vec<GpsPoint>) {
        self.points.extend(other);
        self.points.sort_by_key(|p| p.timestamp);
    }
}

/// Trajectories keyed by user id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub provenance: String,
    trajectories: BTreeMap<String, Trajectory>,
}

impl Dataset {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            provenance: provenance.into(),
            trajectories: BTreeMap::new(),
        }
    }

    /// Adds a trajectory, merging with any existing one for the same user.
    pub fn insert(&mut self, trajectory: Trajectory) {
        match self.trajectories.get_mut(trajectory.user_id()) {
            Some(existing) => existing.merge(trajectory.points),
            None => {
                self.trajectories
                    .insert(trajectory.user_id.clone(), trajectory);
            }
        }
    }

    pub fn get(&self, user_id: &str) -> Option<&Trajectory> {
        self.trajectories.get(user_id)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.trajectories.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_points(&self) -> usize {
        self.trajectories.values().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

impl FromIterator<Trajectory> for Dataset {
    fn from_iter<I: IntoIterator<Item = Trajectory>>(iter: I) -> Self {
        let mut ds = Dataset::default();
        for t in iter {
            ds.insert(t);
        }
        ds
    }
}

/// Axis-aligned latitude/longitude box. Bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    /// Greater Beijing.
    pub const BEIJING: BBox = BBox {
        min_lat: 39.748,
        min_lon: 116.165,
        max_lat: 40.038,
        max_lon: 116.628,
    };

    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self> {
        let b = Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        check_lat_lon(self.min_lat, self.min_lon).map_err(|e| Error::InvalidBBox(e.to_string()))?;
        check_lat_lon(self.max_lat, self.max_lon).map_err(|e| Error::InvalidBBox(e.to_string()))?;
        if !(self.min_lat < self.max_lat && self.min_lon < self.max_lon) {
            return Err(Error::InvalidBBox(format!(
                "require min < max, got lat [{}, {}] lon [{}, {}]",
                self.min_lat, self.max_lat, self.min_lon, self.max_lon
            )));
        }
        Ok(())
    }

    pub fn contains<C: Coord>(&self, c: &C) -> bool {
        (self.min_lat..=self.max_lat).contains(&c.lat())
            && (self.min_lon..=self.max_lon).contains(&c.lon())
    }

    pub fn center(&self) -> LatLon {
        LatLon::new(
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }
}

impl std::str::FromStr for BBox {
    type Err = Error;

    /// `min_lat,min_lon,max_lat,max_lon`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidBBox(format!("`{s}`: {e}")))?;
        match parts.as_slice() {
            &[a, b, c, d] => BBox::new(a, b, c, d),
            _ => Err(Error::InvalidBBox(format!("`{s}`: expected 4 numbers"))),
        }
    }
}

/// Keeps only points inside `bbox`; users left without points are dropped.
pub fn filter_bbox(ds: &Dataset, bbox: &BBox) -> Dataset {
    let mut out = Dataset::new(ds.provenance.clone());
    for t in ds.trajectories() {
        let kept: Vec<GpsPoint> = t.points().iter().filter(|p| bbox.contains(*p)).copied().collect();
        if !kept.is_empty() {
            out.trajectories.insert(
                t.user_id.clone(),
                Trajectory {
                    user_id: t.user_id.clone(),
                    points: kept,
                },
            );
        }
    }
    out
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine<A: Coord + ?Sized, B: Coord + ?Sized>(a: &A, b: &B) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn format_iso(ts: i64) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}

/// Parses `YYYY-MM-DDTHH:MM:SSZ` (or any RFC 3339 instant) to UTC seconds.
pub fn parse_iso(s: &str) -> Result<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map(|n| n.and_utc().timestamp())
        .map_err(|e| Error::InvalidCoordinate(format!("bad timestamp `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64, ts: i64) -> GpsPoint {
        GpsPoint::new(lat, lon, ts, None).unwrap()
    }

    #[test]
    fn haversine_identity_is_zero() {
        let p = pt(39.9, 116.4, 0);
        assert_eq!(haversine(&p, &p), 0.0);
    }

    #[test]
    fn haversine_matches_chord_oracle() {
        // 40-digit chord-length evaluation on the unit sphere.
        let a = LatLon::new(39.9, 116.4);
        let b = LatLon::new(39.9, 116.41);
        assert!((haversine(&a, &b) - 853.048_727_357).abs() < 0.5);
        let c = LatLon::new(39.909, 116.4);
        assert!((haversine(&a, &c) - 1000.754_339_801).abs() < 0.5);
    }

    #[test]
    fn bbox_rejects_inverted_bounds() {
        assert!(BBox::new(40.0, 116.0, 39.0, 117.0).is_err());
        assert!(BBox::new(39.0, 116.0, 40.0, 116.0).is_err());
        assert!(BBox::new(39.0, 116.0, 91.0, 117.0).is_err());
        assert!("39.748,116.165,40.038".parse::<BBox>().is_err());
        assert_eq!("39.748, 116.165, 40.038, 116.628".parse::<BBox>().unwrap(), BBox::BEIJING);
    }

    #[test]
    fn beijing_filter_examples() {
        let bj = BBox::BEIJING;
        let ds: Dataset = vec![
            Trajectory::new("a", vec![pt(39.9, 116.4, 10), pt(41.0, 116.4, 20)]),
            Trajectory::new("b", vec![pt(41.0, 116.4, 10), pt(30.0, 100.0, 20)]),
        ]
        .into_iter()
        .collect();
        let out = filter_bbox(&ds, &bj);
        assert_eq!(out.n_users(), 1);
        assert_eq!(out.get("a").unwrap().points(), &[pt(39.9, 116.4, 10)]);
        assert!(out.get("b").is_none());
    }

    #[test]
    fn bbox_bounds_are_inclusive() {
        let b = BBox::BEIJING;
        assert!(b.contains(&LatLon::new(b.min_lat, b.min_lon)));
        assert!(b.contains(&LatLon::new(b.max_lat, b.max_lon)));
    }

    #[test]
    fn trajectory_sort_is_stable_for_duplicate_timestamps() {
        let t = Trajectory::new("u", vec![pt(1.0, 1.0, 5), pt(2.0, 2.0, 3), pt(3.0, 3.0, 5)]);
        let lats: Vec<f64> = t.points().iter().map(|p| p.lat).collect();
        assert_eq!(lats, vec![2.0, 1.0, 3.0]);
    }

    #[test]
    fn point_validation() {
        assert!(GpsPoint::new(91.0, 0.0, 0, None).is_err());
        assert!(GpsPoint::new(0.0, -181.0, 0, None).is_err());
        assert!(GpsPoint::new(0.0, 0.0, -1, None).is_err());
        assert!(GpsPoint::new(0.0, 0.0, MAX_TIMESTAMP, None).is_err());
    }

    #[test]
    fn iso_round_trip() {
        let ts = 1_224_730_384; // 2008-10-23T02:53:04Z
        assert_eq!(format_iso(ts), "2008-10-23T02:53:04Z");
        assert_eq!(parse_iso("2008-10-23T02:53:04Z").unwrap(), ts);
    }
}
