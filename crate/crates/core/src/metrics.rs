//! Trip-distance geo-statistics and the relative-deviation similarity score.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{filter_bbox, haversine, BBox, Dataset, LatLon};
use crate::staypoints::{derive_trips, extract_dataset, filter_active_users, StayPoint, StaypointParams, Trip};

const SECONDS_PER_DAY: i64 = 86_400;

/// The four trip-distance statistics, all in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// average distance per trip
    pub adt: f64,
    /// average distance per agent per day
    pub ada: f64,
    /// maximum trip distance
    pub mxd: f64,
    /// median trip distance
    pub mdd: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 4] = ["ADT", "ADA", "MXD", "MDD"];

    /// Published GeoLife statistics for the Beijing active-user subset.
    pub const GEOLIFE: MetricSet = MetricSet {
        adt: 3692.13,
        ada: 4474.59,
        mxd: 30262.0,
        mdd: 3349.75,
    };

    pub fn values(&self) -> [f64; 4] {
        [self.adt, self.ada, self.mxd, self.mdd]
    }

    pub fn scaled(&self, factor: f64) -> MetricSet {
        MetricSet {
            adt: self.adt * factor,
            ada: self.ada * factor,
            mxd: self.mxd * factor,
            mdd: self.mdd * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::UndefinedMetrics(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Which (user, day) pairs ADA averages over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaMode {
    /// only days on which the user made at least one trip
    #[default]
    ActiveDays,
    /// every calendar day between a user's first and last trip departure
    SpanDays,
}

/// Ascending sum so the result does not depend on input order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn compute_metrics(trips: &[Trip]) -> Result<MetricSet> {
    compute_metrics_with(trips, AdaMode::ActiveDays)
}

pub fn compute_metrics_with(trips: &[Trip], mode: AdaMode) -> Result<MetricSet> {
    if trips.is_empty() {
        return Err(Error::UndefinedMetrics("no trips".into()));
    }
    let mut distances: Vec<f64> = trips.iter().map(|t| t.distance).collect();
    let total = ordered_sum(&mut distances);
    let mxd = distances[distances.len() - 1];
    // rounding in the sum can put the mean one ulp above the maximum
    let adt = (total / distances.len() as f64).min(mxd);
    let mdd = median(&distances);

    let mut per_day: BTreeMap<(&str, i64), Vec<f64>> = BTreeMap::new();
    for t in trips {
        per_day
            .entry((t.user_id.as_str(), t.depart.div_euclid(SECONDS_PER_DAY)))
            .or_default()
            .push(t.distance);
    }
    let day_totals: Vec<f64> = per_day.values_mut().map(|d| ordered_sum(d)).collect();
    let days = match mode {
        AdaMode::ActiveDays => day_totals.len() as f64,
        AdaMode::SpanDays => {
            let mut span: BTreeMap<&str, (i64, i64)> = BTreeMap::new();
            for &(user, day) in per_day.keys() {
                let e = span.entry(user).or_insert((day, day));
                e.0 = e.0.min(day);
                e.1 = e.1.max(day);
            }
            span.values().map(|(lo, hi)| (hi - lo + 1) as f64).sum()
        }
    };
    let ada = day_totals.iter().sum::<f64>() / days;

    let m = MetricSet { adt, ada, mxd, mdd };
    m.validate()?;
    Ok(m)
}

/// Relative-deviation similarity; 1 means identical metric sets.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(pub f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `1 - mean_k |k(p) - k(g)| / k(g)` over the four metrics. Not clamped.
pub fn similarity(target: &MetricSet, candidate: &MetricSet) -> Result<SimilarityScore> {
    let mut deviation = 0.0;
    for ((name, g), p) in MetricSet::NAMES.iter().zip(target.values()).zip(candidate.values()) {
        if !(g > 0.0) {
            return Err(Error::DivisionByZero(name));
        }
        deviation += (p - g).abs() / g;
    }
    Ok(SimilarityScore(1.0 - deviation / MetricSet::NAMES.len() as f64))
}

/// Machine-readable metric record for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_label: String,
    pub adt: f64,
    pub ada: f64,
    pub mxd: f64,
    pub mdd: f64,
    pub score_vs_target: Option<f64>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, m: &MetricSet, target: Option<&MetricSet>) -> Result<Self> {
        let score_vs_target = target.map(|t| similarity(t, m)).transpose()?.map(SimilarityScore::value);
        Ok(Self {
            dataset_label: label.into(),
            adt: m.adt,
            ada: m.ada,
            mxd: m.mxd,
            mdd: m.mdd,
            score_vs_target,
        })
    }

    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            adt: self.adt,
            ada: self.ada,
            mxd: self.mxd,
            mdd: self.mdd,
        }
    }
}

/// Settings shared by the real-data and simulated-data measurement paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub staypoints: StaypointParams,
    pub min_staypoints: usize,
    pub bbox: Option<BBox>,
    pub ada_mode: AdaMode,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            staypoints: StaypointParams::default(),
            min_staypoints: 100,
            bbox: None,
            ada_mode: AdaMode::ActiveDays,
        }
    }
}

/// Secondary statistics; never part of the similarity score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoStats {
    pub users: usize,
    pub staypoints: usize,
    pub trips: usize,
    pub active_user_days: usize,
    pub trips_per_active_day: f64,
    pub mean_radius_of_gyration: f64,
}

#[derive(Debug, Clone)]
pub struct Measurement {
    pub staypoints: BTreeMap<String, Vec<StayPoint>>,
    pub active_users: BTreeSet<String>,
    pub trips: Vec<Trip>,
    pub info: InfoStats,
}

impl Measurement {
    pub fn metrics(&self, mode: AdaMode) -> Result<MetricSet> {
        compute_metrics_with(&self.trips, mode)
    }

    pub fn active_staypoints(&self) -> impl Iterator<Item = &StayPoint> {
        self.active_users
            .iter()
            .flat_map(move |u| self.staypoints[u].iter())
    }
}

/// RMS distance of staypoints from their centroid.
pub fn radius_of_gyration(staypoints: &[StayPoint]) -> f64 {
    if staypoints.is_empty() {
        return 0.0;
    }
    let n = staypoints.len() as f64;
    let c = LatLon::new(
        staypoints.iter().map(|s| s.lat).sum::<f64>() / n,
        staypoints.iter().map(|s| s.lon).sum::<f64>() / n,
    );
    (staypoints.iter().map(|s| haversine(s, &c).powi(2)).sum::<f64>() / n).sqrt()
}

/// Active-user filter and trip derivation over per-user staypoints.
pub fn measure_staypoints(staypoints: BTreeMap<String, Vec<StayPoint>>, min_staypoints: usize) -> Measurement {
    let active_users = filter_active_users(&staypoints, min_staypoints);
    let trips: Vec<Trip> = active_users
        .iter()
        .flat_map(|u| derive_trips(&staypoints[u]))
        .collect();
    let days: BTreeSet<(&str, i64)> = trips
        .iter()
        .map(|t| (t.user_id.as_str(), t.depart.div_euclid(SECONDS_PER_DAY)))
        .collect();
    let rogs: Vec<f64> = active_users.iter().map(|u| radius_of_gyration(&staypoints[u])).collect();
    let info = InfoStats {
        users: active_users.len(),
        staypoints: active_users.iter().map(|u| staypoints[u].len()).sum(),
        trips: trips.len(),
        active_user_days: days.len(),
        trips_per_active_day: if days.is_empty() { 0.0 } else { trips.len() as f64 / days.len() as f64 },
        mean_radius_of_gyration: if rogs.is_empty() { 0.0 } else { rogs.iter().sum::<f64>() / rogs.len() as f64 },
    };
    Measurement {
        staypoints,
        active_users,
        trips,
        info,
    }
}

/// Optional bbox filter, staypoint extraction, active-user filter, trips.
pub fn measure_dataset(ds: &Dataset, cfg: &MeasureConfig) -> Measurement {
    let staypoints = match &cfg.bbox {
        Some(b) => extract_dataset(&filter_bbox(ds, b), &cfg.staypoints),
        None => extract_dataset(ds, &cfg.staypoints),
    };
    measure_staypoints(staypoints, cfg.min_staypoints)
}
