//! Dwell-region (staypoint) detection and the trips connecting staypoints.
//!
//! A staypoint is the maximal run of fixes that stay within a distance
//! threshold of the run's first fix (the anchor) for at least a time
//! threshold. Its position is the arithmetic mean of the run.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::tsv::{field, read_table, time_field};
use crate::geodata::{format_iso, haversine, Coord, Dataset, GpsPoint, LatLon};

pub const STAYPOINT_TSV_HEADER: &str = "user_id\tlat\tlon\tarrive\tdepart\tn_points";
pub const TRIP_TSV_HEADER: &str = "user_id\to_lat\to_lon\td_lat\td_lon\tdistance_m\tdepart\tarrive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    pub arrive: i64,
    pub depart: i64,
    pub n_points: usize,
}

impl StayPoint {
    pub fn duration(&self) -> i64 {
        self.depart - self.arrive
    }

    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

impl Coord for StayPoint {
    fn lat(&self) -> f64 {
        self.lat
    }
    fn lon(&self) -> f64 {
        self.lon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub user_id: String,
    pub origin: StayPoint,
    pub destination: StayPoint,
    pub distance: f64,
    pub depart: i64,
    pub arrive: i64,
}

impl Trip {
    pub fn between(origin: &StayPoint, destination: &StayPoint) -> Self {
        Trip {
            user_id: origin.user_id.clone(),
            distance: haversine(origin, destination),
            depart: origin.depart,
            arrive: destination.arrive,
            origin: origin.clone(),
            destination: destination.clone(),
        }
    }

    pub fn row(&self) -> TripRow {
        TripRow {
            user_id: self.user_id.clone(),
            origin: self.origin.position(),
            destination: self.destination.position(),
            distance: self.distance,
            depart: self.depart,
            arrive: self.arrive,
        }
    }
}

/// Flat trip as stored in the trip TSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRow {
    pub user_id: String,
    pub origin: LatLon,
    pub destination: LatLon,
    pub distance: f64,
    pub depart: i64,
    pub arrive: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaypointParams {
    /// meters
    pub dist_threshold: f64,
    /// seconds
    pub time_threshold: i64,
}

impl Default for StaypointParams {
    fn default() -> Self {
        Self {
            dist_threshold: 200.0,
            time_threshold: 30 * 60,
        }
    }
}

impl StaypointParams {
    pub fn new(dist_threshold: f64, time_threshold: i64) -> Result<Self> {
        let p = Self {
            dist_threshold,
            time_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dist_threshold > 0.0 && self.dist_threshold.is_finite()) || self.time_threshold <= 0 {
            return Err(Error::Config(format!(
                "staypoint thresholds must be strictly positive, got {} m / {} s",
                self.dist_threshold, self.time_threshold
            )));
        }
        Ok(())
    }
}

fn centroid(user_id: &str, run: &[GpsPoint]) -> StayPoint {
    let n = run.len() as f64;
    let (mut lat, mut lon) = (0.0, 0.0);
    for p in run {
        lat += p.lat;
        lon += p.lon;
    }
    StayPoint {
        user_id: user_id.to_string(),
        lat: lat / n,
        lon: lon / n,
        arrive: run[0].timestamp,
        depart: run[run.len() - 1].timestamp,
        n_points: run.len(),
    }
}

/// Detects staypoints in time-ordered `points`.
pub fn extract_staypoints(user_id: &str, points: &[GpsPoint], params: &StaypointParams) -> Vec<StayPoint> {
    let n = points.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let anchor = &points[i];
        let mut j = i + 1;
        while j < n && haversine(anchor, &points[j]) <= params.dist_threshold {
            j += 1;
        }
        // points[i..j] all lie within the threshold of the anchor
        if points[j - 1].timestamp - anchor.timestamp >= params.time_threshold {
            out.push(centroid(user_id, &points[i..j]));
            i = j;
        } else if j == n {
            // a shorter tail cannot satisfy the time threshold either
            break;
        } else {
            i += 1;
        }
    }
    out
}

/// Staypoints for every user of `ds`, keyed by user id.
pub fn extract_dataset(ds: &Dataset, params: &StaypointParams) -> BTreeMap<String, Vec<StayPoint>> {
    let trajectories: Vec<_> = ds.trajectories().collect();
    trajectories
        .par_iter()
        .map(|t| (t.user_id().to_string(), extract_staypoints(t.user_id(), t.points(), params)))
        .collect()
}

/// One trip per consecutive pair of staypoints.
pub fn derive_trips(staypoints: &[StayPoint]) -> Vec<Trip> {
    staypoints.windows(2).map(|w| Trip::between(&w[0], &w[1])).collect()
}

/// Users with at least `min_staypoints` staypoints.
pub fn filter_active_users(
    per_user: &BTreeMap<String, Vec<StayPoint>>,
    min_staypoints: usize,
) -> BTreeSet<String> {
    per_user
        .iter()
        .filter(|(_, sps)| sps.len() >= min_staypoints)
        .map(|(u, _)| u.clone())
        .collect()
}

pub fn write_staypoint<W: Write>(w: &mut W, sp: &StayPoint) -> std::io::Result<()> {
    writeln!(
        w,
        "{}\t{}\t{}\t{}\t{}\t{}",
        sp.user_id,
        sp.lat,
        sp.lon,
        format_iso(sp.arrive),
        format_iso(sp.depart),
        sp.n_points
    )
}

pub fn write_staypoints_tsv<'a, W, I>(w: &mut W, staypoints: I) -> std::io::Result<usize>
where
    W: Write,
    I: IntoIterator<Item = &'a StayPoint>,
{
    writeln!(w, "{STAYPOINT_TSV_HEADER}")?;
    let mut n = 0;
    for sp in staypoints {
        write_staypoint(w, sp)?;
        n += 1;
    }
    Ok(n)
}

pub fn write_trips_tsv<'a, W, I>(w: &mut W, trips: I) -> std::io::Result<usize>
where
    W: Write,
    I: IntoIterator<Item = &'a Trip>,
{
    writeln!(w, "{TRIP_TSV_HEADER}")?;
    let mut n = 0;
    for t in trips {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.user_id,
            t.origin.lat,
            t.origin.lon,
            t.destination.lat,
            t.destination.lon,
            t.distance,
            format_iso(t.depart),
            format_iso(t.arrive)
        )?;
        n += 1;
    }
    Ok(n)
}

pub fn read_staypoints_tsv(path: &Path) -> Result<Vec<StayPoint>> {
    let mut out = Vec::new();
    read_table(path, "staypoint TSV", STAYPOINT_TSV_HEADER, |_, f| {
        out.push(StayPoint {
            user_id: f[0].to_string(),
            lat: field(f[1], "lat")?,
            lon: field(f[2], "lon")?,
            arrive: time_field(f[3])?,
            depart: time_field(f[4])?,
            n_points: field(f[5], "n_points")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_trips_tsv(path: &Path) -> Result<Vec<TripRow>> {
    let mut out = Vec::new();
    read_table(path, "trip TSV", TRIP_TSV_HEADER, |_, f| {
        out.push(TripRow {
            user_id: f[0].to_string(),
            origin: LatLon::new(field(f[1], "o_lat")?, field(f[2], "o_lon")?),
            destination: LatLon::new(field(f[3], "d_lat")?, field(f[4], "d_lon")?),
            distance: field(f[5], "distance_m")?,
            depart: time_field(f[6])?,
            arrive: time_field(f[7])?,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Groups a staypoint stream by user, preserving per-user order.
pub fn group_by_user<'a, I>(staypoints: I) -> BTreeMap<String, Vec<StayPoint>>
where
    I: IntoIterator<Item = &'a StayPoint>,
{
    let mut map: BTreeMap<String, Vec<StayPoint>> = BTreeMap::new();
    for sp in staypoints {
        map.entry(sp.user_id.clone()).or_default().push(sp.clone());
    }
    map
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64, ts: i64) -> GpsPoint {
        GpsPoint::new(lat, lon, ts, None).unwrap()
    }

    #[test]
    fn identical_points_form_one_staypoint() {
        let pts: Vec<_> = (0..5).map(|i| pt(39.9, 116.4, 1_000_000 + i * 600)).collect();
        let sps = extract_staypoints("u", &pts, &StaypointParams::default());
        assert_eq!(sps.len(), 1);
        assert_eq!(sps[0].n_points, 5);
        assert_eq!(sps[0].duration(), 40 * 60);
        assert!((sps[0].lat - 39.9).abs() < 1e-12 && (sps[0].lon - 116.4).abs() < 1e-12);
    }

    #[test]
    fn constant_motion_never_dwells() {
        // 300 m north every 60 s
        let step = 300.0 / 6_371_000.0_f64;
        let pts: Vec<_> = (0..100)
            .map(|i| pt(39.9 + (i as f64 * step).to_degrees(), 116.4, 1_000_000 + i * 60))
            .collect();
        assert!(extract_staypoints("u", &pts, &StaypointParams::default()).is_empty());
    }

    #[test]
    fn empty_trajectory_gives_no_staypoints() {
        assert!(extract_staypoints("u", &[], &StaypointParams::default()).is_empty());
    }

    #[test]
    fn trailing_window_is_emitted() {
        let mut pts = vec![pt(39.0, 116.0, 0), pt(39.1, 116.0, 60)];
        pts.extend((0..4).map(|i| pt(39.5, 116.0, 120 + i * 900)));
        let sps = extract_staypoints("u", &pts, &StaypointParams::default());
        assert_eq!(sps.len(), 1);
        assert_eq!((sps[0].arrive, sps[0].depart, sps[0].n_points), (120, 120 + 2700, 4));
    }

    #[test]
    fn params_must_be_positive() {
        assert!(StaypointParams::new(0.0, 10).is_err());
        assert!(StaypointParams::new(10.0, 0).is_err());
        assert!(StaypointParams::new(f64::NAN, 10).is_err());
        assert!(StaypointParams::new(200.0, 1800).is_ok());
    }

    fn sp(user: &str, lat: f64, lon: f64, arrive: i64, depart: i64) -> StayPoint {
        StayPoint {
            user_id: user.into(),
            lat,
            lon,
            arrive,
            depart,
            n_points: 2,
        }
    }

    #[test]
    fn trips_between_two_staypoints() {
        // 0.009 degrees of latitude at 39.9 N; chord oracle gives 1000.7543 m
        let a = sp("u", 39.9, 116.4, 0, 100);
        let b = sp("u", 39.909, 116.4, 200, 300);
        let trips = derive_trips(&[a.clone(), b.clone()]);
        assert_eq!(trips.len(), 1);
        assert!((trips[0].distance - 1000.754_339_8).abs() < 1e-3);
        assert_eq!((trips[0].depart, trips[0].arrive), (100, 200));
        assert!(derive_trips(&[a.clone()]).is_empty());
        assert!(derive_trips(&[]).is_empty());

        let c = sp("u", 39.95, 116.5, 400, 500);
        let chain = derive_trips(&[a, b, c]);
        assert_eq!(chain.len(), 2);
        assert_eq!(chain[0].destination, chain[1].origin);
    }

    #[test]
    fn active_user_boundary_is_inclusive() {
        let mut per_user = BTreeMap::new();
        for (u, n) in [("44", 99), ("45", 100), ("46", 101)] {
            per_user.insert(u.to_string(), vec![sp(u, 0.0, 0.0, 0, 1); n]);
        }
        let active = filter_active_users(&per_user, 100);
        assert_eq!(active.into_iter().collect::<Vec<_>>(), vec!["45", "46"]);
        assert!(filter_active_users(&BTreeMap::new(), 100).is_empty());
    }

    #[test]
    fn tsv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sps = vec![
            sp("a", 39.9 + 1.0 / 3.0, 116.4, 1_200_000_000, 1_200_003_600),
            sp("a", 39.95, 116.1 / 7.0, 1_200_009_000, 1_200_019_000),
        ];
        let path = dir.path().join("sp.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        write_staypoints_tsv(&mut f, &sps).unwrap();
        drop(f);
        assert_eq!(read_staypoints_tsv(&path).unwrap(), sps);

        let trips = derive_trips(&sps);
        let path = dir.path().join("trips.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        write_trips_tsv(&mut f, &trips).unwrap();
        drop(f);
        let rows: Vec<TripRow> = trips.iter().map(Trip::row).collect();
        assert_eq!(read_trips_tsv(&path).unwrap(), rows);
    }

    /// Random walk mixing dwells (tiny jitter) and moves.
    fn trajectory() -> impl Strategy<Value = (Vec<GpsPoint>, StaypointParams)> {
        (
            prop::collection::vec((0u8..4, -1.0f64..1.0, -1.0f64..1.0, 0i64..900), 1..120),
            20.0f64..500.0,
            60i64..3600,
        )
            .prop_map(|(steps, d, t)| {
                let (mut lat, mut lon, mut ts) = (39.9, 116.4, 1_200_000_000i64);
                let pts = steps
                    .into_iter()
                    .map(|(kind, dy, dx, dt)| {
                        let scale = if kind == 0 { 0.01 } else { 0.0005 };
                        lat += dy * scale;
                        lon += dx * scale;
                        ts += dt;
                        GpsPoint::new(lat, lon, ts, None).unwrap()
                    })
                    .collect();
                (pts, StaypointParams::new(d, t).unwrap())
            })
    }

    proptest! {
        #[test]
        fn matches_brute_force((pts, params) in trajectory()) {
            let fast = extract_staypoints("u", &pts, &params);
            prop_assert_eq!(&fast, &oracle::brute_force("u", &pts, &params));
            for w in fast.windows(2) {
                prop_assert!(w[0].depart <= w[1].arrive);
            }
            for s in &fast {
                prop_assert!(s.duration() >= params.time_threshold);
                prop_assert!(s.n_points >= 2);
                // re-scan: members lie within the threshold of the anchor
                let found = (0..pts.len()).filter(|&i| pts[i].timestamp == s.arrive).any(|start| {
                    let members = &pts[start..(start + s.n_points).min(pts.len())];
                    members.len() == s.n_points
                        && members.iter().all(|p| haversine(&members[0], p) <= params.dist_threshold)
                });
                prop_assert!(found);
            }
            prop_assert_eq!(derive_trips(&fast).len(), fast.len().saturating_sub(1));
        }
    }
}
