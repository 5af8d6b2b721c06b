//! Seedable needs-driven mobility simulator.
//!
//! Agents live in a synthetic city of home, work, restaurant and recreation
//! sites. Four needs (sleep, hunger, income, leisure) grow over time; an idle
//! agent whose most urgent need crosses its trigger threshold travels in a
//! straight line to a site that services it and dwells there. Positions are
//! sampled at a fixed interval to produce a GPS stream that is measured with
//! the same staypoint pipeline as real data.

mod params;
mod world;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{BBox, GpsPoint, LatLon, Trajectory};
use crate::metrics::{compute_metrics_with, measure_staypoints, MeasureConfig, Measurement, MetricSet};
use crate::staypoints::{extract_staypoints, StayPoint};

pub use params::{ParamEntry, ParamKind, ParamSpec, ParamVector};
pub use world::{build_world, site_count, Projection, Site, SiteKind, World};

const STREAM_WORLD: u64 = 1;
const STREAM_AGENTS: u64 = 2;
const SECONDS_PER_DAY: i64 = 86_400;
const SECONDS_PER_HOUR: f64 = 3_600.0;

/// 2008-01-01T00:00:00Z
pub const DEFAULT_START_TIME: i64 = 1_199_145_600;

/// Parameter names the simulator reads; a spec must contain all of them.
pub const CORE_PARAMS: [&str; 32] = [
    "n_interests",
    "interest_pool",
    "restaurant_choices",
    "walk_speed",
    "drive_speed",
    "drive_distance_cutoff",
    "commute_distance_min",
    "commute_distance_max",
    "work_start_mean",
    "work_start_jitter",
    "work_hours",
    "work_days_per_week",
    "eat_out_prob",
    "sleep_rate",
    "hunger_rate",
    "income_rate",
    "leisure_rate",
    "sleep_threshold",
    "hunger_threshold",
    "income_threshold",
    "leisure_threshold",
    "sleep_duration",
    "meal_duration",
    "leisure_duration",
    "duration_jitter",
    "home_density",
    "work_density",
    "restaurant_density",
    "recreation_density",
    "cluster_count",
    "cluster_spread",
    "cluster_fraction",
];

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Typed view of a [`ParamVector`]. Rates are per hour, durations and
/// clock times in hours, distances in meters, speeds in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub n_interests: usize,
    pub interest_pool: usize,
    pub restaurant_choices: usize,
    pub walk_speed: f64,
    pub drive_speed: f64,
    pub drive_distance_cutoff: f64,
    pub commute_distance_min: f64,
    pub commute_distance_max: f64,
    pub work_start_mean: f64,
    pub work_start_jitter: f64,
    pub work_hours: f64,
    pub work_days_per_week: usize,
    pub eat_out_prob: f64,
    /// indexed by [`Need`]
    pub growth: [f64; 4],
    /// indexed by [`Need`]
    pub threshold: [f64; 4],
    pub sleep_duration: f64,
    pub meal_duration: f64,
    pub leisure_duration: f64,
    pub duration_jitter: f64,
    pub home_density: f64,
    pub work_density: f64,
    pub restaurant_density: f64,
    pub recreation_density: f64,
    pub cluster_count: usize,
    pub cluster_spread: f64,
    pub cluster_fraction: f64,
}

impl SimParams {
    /// Validates `v` against `spec` and reads the simulator's parameters.
    pub fn resolve(spec: &ParamSpec, v: &ParamVector) -> Result<Self> {
        v.validate(spec)?;
        let get = |name: &str| -> Result<f64> {
            v.get(spec, name)
                .ok_or_else(|| Error::InvalidParams(format!("missing parameter `{name}`")))
        };
        let count = |name: &str| -> Result<usize> { Ok(get(name)?.max(0.0) as usize) };
        Ok(Self {
            n_interests: count("n_interests")?,
            interest_pool: count("interest_pool")?,
            restaurant_choices: count("restaurant_choices")?,
            walk_speed: get("walk_speed")?,
            drive_speed: get("drive_speed")?,
            drive_distance_cutoff: get("drive_distance_cutoff")?,
            commute_distance_min: get("commute_distance_min")?,
            commute_distance_max: get("commute_distance_max")?,
            work_start_mean: get("work_start_mean")?,
            work_start_jitter: get("work_start_jitter")?,
            work_hours: get("work_hours")?,
            work_days_per_week: count("work_days_per_week")?,
            eat_out_prob: get("eat_out_prob")?,
            growth: [
                get("sleep_rate")?,
                get("hunger_rate")?,
                get("income_rate")?,
                get("leisure_rate")?,
            ],
            threshold: [
                get("sleep_threshold")?,
                get("hunger_threshold")?,
                get("income_threshold")?,
                get("leisure_threshold")?,
            ],
            sleep_duration: get("sleep_duration")?,
            meal_duration: get("meal_duration")?,
            leisure_duration: get("leisure_duration")?,
            duration_jitter: get("duration_jitter")?,
            home_density: get("home_density")?,
            work_density: get("work_density")?,
            restaurant_density: get("restaurant_density")?,
            recreation_density: get("recreation_density")?,
            cluster_count: count("cluster_count")?,
            cluster_spread: get("cluster_spread")?,
            cluster_fraction: get("cluster_fraction")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Need {
    Sleep = 0,
    Hunger = 1,
    Income = 2,
    Leisure = 3,
}

impl Need {
    pub const ALL: [Need; 4] = [Need::Sleep, Need::Hunger, Need::Income, Need::Leisure];
}

/// Run-level settings that are not calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub bbox: BBox,
    pub agents: usize,
    pub days: u32,
    /// seconds per update step
    pub tick: i64,
    /// seconds between GPS samples
    pub sample_interval: i64,
    /// UTC seconds, midnight aligned
    pub start_time: i64,
    pub record_gps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            bbox: BBox::BEIJING,
            agents: 100,
            days: 30,
            tick: 60,
            sample_interval: 300,
            start_time: DEFAULT_START_TIME,
            record_gps: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.agents == 0 {
            return bad("agents must be at least 1".into());
        }
        if self.days == 0 {
            return bad("days must be at least 1".into());
        }
        if self.tick <= 0 || SECONDS_PER_DAY % self.tick != 0 {
            return bad(format!("tick {} must be positive and divide a day", self.tick));
        }
        if self.sample_interval < self.tick || self.sample_interval % self.tick != 0 {
            return bad(format!(
                "sample interval {} must be a multiple of tick {}",
                self.sample_interval, self.tick
            ));
        }
        if self.start_time.rem_euclid(SECONDS_PER_DAY) != 0 {
            return bad(format!("start time {} is not midnight UTC", self.start_time));
        }
        let end = self.end_time();
        crate::geodata::check_timestamp(self.start_time)?;
        crate::geodata::check_timestamp(end)?;
        Ok(())
    }

    pub fn end_time(&self) -> i64 {
        self.start_time + self.days as i64 * SECONDS_PER_DAY
    }
}

/// Fixed-interval GPS samples of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub user_id: String,
    pub start: i64,
    pub interval: i64,
    pub positions: Vec<LatLon>,
}

impl AgentTrack {
    pub fn points(&self) -> impl Iterator<Item = GpsPoint> + '_ {
        self.positions.iter().enumerate().map(|(k, p)| GpsPoint {
            lat: p.lat,
            lon: p.lon,
            timestamp: self.start + k as i64 * self.interval,
            altitude: None,
        })
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory::new(self.user_id.clone(), self.points().collect())
    }
}

/// Everything needed to regenerate a run, plus its output counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub spec_hash: String,
    pub config: SimConfig,
    pub n_sites: usize,
    pub n_staypoints: usize,
    pub n_gps: usize,
    pub work_assignment_fallbacks: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// dwell records, grouped by agent in id order
    pub staypoints: Vec<StayPoint>,
    /// one track per agent when GPS recording is on
    pub gps: Option<Vec<AgentTrack>>,
    pub meta: RunMeta,
    /// extreme need levels observed over all agents and ticks
    pub need_range: NeedRange,
}

impl SimOutput {
    pub fn n_gps(&self) -> usize {
        self.gps.as_ref().map_or(0, |g| g.iter().map(|t| t.positions.len()).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Idle,
    Dwelling { until: i64, need: Option<Need> },
    Traveling { dest: usize, speed: f64, need: Option<Need> },
}

struct Agent {
    user_id: String,
    index: usize,
    home: usize,
    work: usize,
    interests: Vec<usize>,
    needs: [f64; 4],
    x: f64,
    y: f64,
    site: Option<usize>,
    state: State,
    stay_arrive: i64,
    stay_samples: usize,
    work_window: Option<(i64, i64)>,
    staypoints: Vec<StayPoint>,
}

struct Ctx<'a> {
    world: &'a World,
    p: &'a SimParams,
    tick: i64,
}

impl Agent {
    fn servicing(&self) -> Option<Need> {
        match self.state {
            State::Dwelling { need, .. } => need,
            _ => None,
        }
    }

    fn grow_needs(&mut self, ctx: &Ctx) {
        let hours = ctx.tick as f64 / SECONDS_PER_HOUR;
        let serviced = self.servicing();
        for n in Need::ALL {
            if Some(n) != serviced {
                let level = &mut self.needs[n as usize];
                *level = (*level + ctx.p.growth[n as usize] * hours).clamp(0.0, 1.0);
            }
        }
    }

    fn close_stay(&mut self, ctx: &Ctx, depart: i64) {
        if let Some(s) = self.site.take() {
            let site = ctx.world.site(s);
            self.staypoints.push(StayPoint {
                user_id: self.user_id.clone(),
                lat: site.lat,
                lon: site.lon,
                arrive: self.stay_arrive,
                depart,
                n_points: self.stay_samples,
            });
        }
    }

    fn dwell_seconds(hours: f64, ctx: &Ctx, rng: &mut ChaCha8Rng) -> i64 {
        let j = ctx.p.duration_jitter;
        let factor = if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
        ((hours * factor * SECONDS_PER_HOUR).round() as i64).max(ctx.tick)
    }

    /// End of a dwell for `need` that starts at `t`.
    fn dwell_until(&self, need: Option<Need>, t: i64, ctx: &Ctx, rng: &mut ChaCha8Rng) -> Option<i64> {
        let hours = match need? {
            Need::Sleep => ctx.p.sleep_duration,
            Need::Hunger => ctx.p.meal_duration,
            Need::Leisure => ctx.p.leisure_duration,
            Need::Income => {
                let end = self.work_window.map_or(t, |(_, end)| end);
                return Some(end.max(t + ctx.tick));
            }
        };
        Some(t + Self::dwell_seconds(hours, ctx, rng))
    }

    fn can_work(&self, t: i64) -> bool {
        self.work_window
            .is_some_and(|(start, end)| t >= start && t + 3_600 <= end)
    }

    fn most_urgent(&self, t: i64, ctx: &Ctx) -> Option<Need> {
        let mut best: Option<Need> = None;
        for n in Need::ALL {
            let level = self.needs[n as usize];
            if level <= ctx.p.threshold[n as usize] || (n == Need::Income && !self.can_work(t)) {
                continue;
            }
            if best.is_none_or(|b| level > self.needs[b as usize]) {
                best = Some(n);
            }
        }
        best
    }

    fn decide(&mut self, t: i64, ctx: &Ctx, rng: &mut ChaCha8Rng) {
        let need = self.most_urgent(t, ctx);
        let dest = match need {
            Some(Need::Sleep) => self.home,
            Some(Need::Income) => self.work,
            Some(Need::Hunger) => {
                if rng.random::<f64>() < ctx.p.eat_out_prob {
                    let near = ctx.world.nearest(SiteKind::Restaurant, self.x, self.y, ctx.p.restaurant_choices);
                    *near.choose(rng).expect("world has restaurants")
                } else {
                    self.home
                }
            }
            Some(Need::Leisure) => *self.interests.choose(rng).expect("interest set is non-empty"),
            None => {
                if self.site == Some(self.home) {
                    return;
                }
                self.home
            }
        };
        if self.site == Some(dest) {
            if let Some(until) = self.dwell_until(need, t, ctx, rng) {
                self.state = State::Dwelling { until, need };
            }
            return;
        }
        let target = ctx.world.site(dest);
        let dist = (target.x - self.x).hypot(target.y - self.y);
        let speed = if dist > ctx.p.drive_distance_cutoff {
            ctx.p.drive_speed
        } else {
            ctx.p.walk_speed
        };
        self.close_stay(ctx, t);
        self.state = State::Traveling { dest, speed, need };
    }

    fn travel(&mut self, t: i64, ctx: &Ctx, rng: &mut ChaCha8Rng) {
        let State::Traveling { dest, speed, need } = self.state else {
            return;
        };
        let target = ctx.world.site(dest);
        let (dx, dy) = (target.x - self.x, target.y - self.y);
        let dist = dx.hypot(dy);
        let step = speed * ctx.tick as f64;
        if dist <= step {
            let arrive = t + ctx.tick;
            self.x = target.x;
            self.y = target.y;
            self.site = Some(dest);
            self.stay_arrive = arrive;
            self.stay_samples = 0;
            self.state = match self.dwell_until(need, arrive, ctx, rng) {
                Some(until) => State::Dwelling { until, need },
                None => State::Idle,
            };
        } else {
            self.x += dx / dist * step;
            self.y += dy / dist * step;
        }
    }

    fn step(&mut self, t: i64, ctx: &Ctx, rng: &mut ChaCha8Rng) {
        self.grow_needs(ctx);
        if let State::Dwelling { until, need } = self.state {
            if t >= until {
                if let Some(n) = need {
                    self.needs[n as usize] = 0.0;
                }
                self.state = State::Idle;
            }
        }
        if self.state == State::Idle {
            self.decide(t, ctx, rng);
        }
        self.travel(t, ctx, rng);
    }

    fn sample(&mut self, ctx: &Ctx) -> LatLon {
        match self.site {
            Some(s) => {
                self.stay_samples += 1;
                let site = ctx.world.site(s);
                LatLon::new(site.lat, site.lon)
            }
            None => ctx.world.projection.to_lat_lon(self.x, self.y),
        }
    }
}

/// Picks a work site whose distance from `home` lies within the commute
/// bounds; falls back to the site closest to the band when none does.
fn assign_work(world: &World, home: usize, p: &SimParams, rng: &mut ChaCha8Rng) -> (usize, bool) {
    let h = world.site(home);
    let works = world.of_kind(SiteKind::Work);
    let in_band: Vec<usize> = works
        .iter()
        .copied()
        .filter(|&w| {
            let d = h.plane_distance(world.site(w));
            d >= p.commute_distance_min && d <= p.commute_distance_max
        })
        .collect();
    if let Some(&w) = in_band.choose(rng) {
        return (w, false);
    }
    let miss = |w: usize| {
        let d = h.plane_distance(world.site(w));
        (p.commute_distance_min - d).max(d - p.commute_distance_max)
    };
    let w = works
        .iter()
        .copied()
        .min_by(|&a, &b| miss(a).total_cmp(&miss(b)).then(a.cmp(&b)))
        .expect("world has work sites");
    (w, true)
}

fn make_agents(world: &World, p: &SimParams, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Agent>, usize) {
    let homes = world.of_kind(SiteKind::Home);
    let mut fallbacks = 0;
    let agents = (0..n)
        .map(|index| {
            let home = homes[index % homes.len()];
            let (work, fell_back) = assign_work(world, home, p, rng);
            fallbacks += fell_back as usize;
            let h = world.site(home);
            let mut pool = world.nearest(SiteKind::Recreation, h.x, h.y, p.n_interests * p.interest_pool);
            pool.shuffle(rng);
            pool.truncate(p.n_interests.max(1));
            let needs = [
                rng.random_range(0.5..1.0),
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
                rng.random_range(0.0..0.5),
            ];
            Agent {
                user_id: format!("{index:05}"),
                index,
                home,
                work,
                interests: pool,
                needs,
                x: h.x,
                y: h.y,
                site: Some(home),
                state: State::Idle,
                stay_arrive: 0,
                stay_samples: 0,
                work_window: None,
                staypoints: Vec::new(),
            }
        })
        .collect();
    (agents, fallbacks)
}

/// Runs the simulation. Output is a pure function of the arguments.
pub fn simulate(world: &World, spec: &ParamSpec, params: &ParamVector, cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    cfg.validate()?;
    let p = SimParams::resolve(spec, params)?;
    let started = Instant::now();
    let mut rng = rng(seed, STREAM_AGENTS);
    let (mut agents, work_assignment_fallbacks) = make_agents(world, &p, cfg.agents, &mut rng);
    for a in &mut agents {
        a.stay_arrive = cfg.start_time;
    }
    let ctx = Ctx {
        world,
        p: &p,
        tick: cfg.tick,
    };

    let n_ticks = cfg.days as i64 * SECONDS_PER_DAY / cfg.tick;
    let n_samples = (cfg.days as i64 * SECONDS_PER_DAY / cfg.sample_interval) as usize;
    let mut tracks: Vec<Vec<LatLon>> = if cfg.record_gps {
        (0..agents.len()).map(|_| Vec::with_capacity(n_samples)).collect()
    } else {
        Vec::new()
    };
    let mut need_range = NeedRange { min: 1.0, max: 0.0 };

    for step in 0..n_ticks {
        let offset = step * cfg.tick;
        let t = cfg.start_time + offset;
        if offset % SECONDS_PER_DAY == 0 {
            let day = offset / SECONDS_PER_DAY;
            for a in &mut agents {
                let workday = ((day as usize + a.index) % 7) < p.work_days_per_week;
                let jitter = rng.random_range(-1.0..=1.0) * p.work_start_jitter;
                a.work_window = workday.then(|| {
                    let start = t + ((p.work_start_mean + jitter) * SECONDS_PER_HOUR).round() as i64;
                    (start, start + (p.work_hours * SECONDS_PER_HOUR).round() as i64)
                });
            }
        }
        if offset % cfg.sample_interval == 0 {
            for (i, a) in agents.iter_mut().enumerate() {
                let pos = a.sample(&ctx);
                if cfg.record_gps {
                    tracks[i].push(pos);
                }
            }
        }
        for a in &mut agents {
            a.step(t, &ctx, &mut rng);
            for &level in &a.needs {
                need_range.min = need_range.min.min(level);
                need_range.max = need_range.max.max(level);
            }
        }
    }

    let end = cfg.end_time();
    let mut staypoints = Vec::new();
    for a in &mut agents {
        a.close_stay(&ctx, end);
        staypoints.append(&mut a.staypoints);
    }
    let gps = cfg.record_gps.then(|| {
        agents
            .iter()
            .zip(tracks)
            .map(|(a, positions)| AgentTrack {
                user_id: a.user_id.clone(),
                start: cfg.start_time,
                interval: cfg.sample_interval,
                positions,
            })
            .collect::<Vec<_>>()
    });
    let n_gps = gps.as_ref().map_or(0, |g| g.iter().map(|t| t.positions.len()).sum());
    let meta = RunMeta {
        seed,
        params: params.to_map(spec),
        spec_hash: spec.hash(),
        config: *cfg,
        n_sites: world.sites().len(),
        n_staypoints: staypoints.len(),
        n_gps,
        work_assignment_fallbacks,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(SimOutput {
        staypoints,
        gps,
        meta,
        need_range,
    })
}

/// Builds the world for `cfg` and simulates it with one seed.
pub fn run(spec: &ParamSpec, params: &ParamVector, cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    cfg.validate()?;
    let p = SimParams::resolve(spec, params)?;
    let world = build_world(&cfg.bbox, cfg.agents, &p, seed)?;
    simulate(&world, spec, params, cfg, seed)
}

/// Re-runs the simulation recorded in `meta`.
pub fn rerun(spec: &ParamSpec, meta: &RunMeta) -> Result<SimOutput> {
    if meta.spec_hash != spec.hash() {
        return Err(Error::InvalidSpec(format!(
            "run was produced with parameter spec {} but {} is loaded",
            meta.spec_hash,
            spec.hash()
        )));
    }
    let params = ParamVector::from_map(spec, &meta.params)?;
    run(spec, &params, &meta.config, meta.seed)
}

/// Runs the simulator's GPS stream through the staypoint, trip and metric
/// pipeline used for real data.
pub fn measure_output(out: &SimOutput, cfg: &MeasureConfig) -> Result<Measurement> {
    let tracks = out
        .gps
        .as_ref()
        .ok_or_else(|| Error::Config("simulation ran without GPS recording".into()))?;
    if tracks.is_empty() {
        return Err(Error::UndefinedMetrics("simulation produced no GPS samples".into()));
    }
    let per_user: BTreeMap<String, Vec<StayPoint>> = tracks
        .par_iter()
        .map(|track| {
            let points: Vec<GpsPoint> = match &cfg.bbox {
                Some(b) => track.points().filter(|p| b.contains(p)).collect(),
                None => track.points().collect(),
            };
            (track.user_id.clone(), extract_staypoints(&track.user_id, &points, &cfg.staypoints))
        })
        .collect();
    Ok(measure_staypoints(per_user, cfg.min_staypoints))
}

pub fn sim_metrics(out: &SimOutput, cfg: &MeasureConfig) -> Result<MetricSet> {
    let m = measure_output(out, cfg)?;
    compute_metrics_with(&m.trips, cfg.ada_mode)
}
