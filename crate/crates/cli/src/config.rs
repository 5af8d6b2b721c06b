//! File configuration merged with command-line overrides.
//!
//! Every section is optional; missing keys take library defaults. The
//! resolved value is echoed into each output directory as
//! `resolved_config.toml` so a run can be repeated from its outputs alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trajcal_core::calibrate::{default_top_k, CalibConfig, ModeWeights};
use trajcal_core::geodata::{format_iso, parse_iso, BBox};
use trajcal_core::metrics::{AdaMode, MeasureConfig, MetricSet};
use trajcal_core::simulate::{ParamSpec, SimConfig, DEFAULT_START_TIME};
use trajcal_core::staypoints::StaypointParams;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// parameter spec file; the built-in spec when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    pub bbox: BBox,
    pub staypoints: StaypointSection,
    pub sim: SimSection,
    pub calibrate: CalibrateSection,
    pub export: ExportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spec: None,
            bbox: BBox::BEIJING,
            staypoints: StaypointSection::default(),
            sim: SimSection::default(),
            calibrate: CalibrateSection::default(),
            export: ExportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaypointSection {
    /// meters
    pub dist_threshold: f64,
    /// seconds
    pub time_threshold: i64,
    pub min_staypoints: usize,
    pub ada_mode: AdaMode,
}

impl Default for StaypointSection {
    fn default() -> Self {
        let m = MeasureConfig::default();
        Self {
            dist_threshold: m.staypoints.dist_threshold,
            time_threshold: m.staypoints.time_threshold,
            min_staypoints: m.min_staypoints,
            ada_mode: m.ada_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub agents: usize,
    pub days: u32,
    pub tick: i64,
    pub sample_interval: i64,
    /// ISO-8601 UTC, midnight
    pub start_time: String,
    pub gps: bool,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let c = SimConfig::default();
        Self {
            agents: c.agents,
            days: c.days,
            tick: c.tick,
            sample_interval: c.sample_interval,
            start_time: format_iso(DEFAULT_START_TIME),
            gps: c.record_gps,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub layer_size: usize,
    /// defaults to max(2, layer_size / 4)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    /// 0 runs until interrupted
    pub max_generations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_score: Option<f64>,
    pub master_seed: u64,
    /// max, min, mean, pick, mutate
    pub mode_weights: [f64; 5],
    /// rescales `mode_weights` so mutate has this probability
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation_prob: Option<f64>,
    pub elitism: bool,
    /// 0 uses every core
    pub workers: usize,
    /// configurations kept in params.top.json
    pub keep_top: usize,
    /// score above which configurations are counted in params.top.json
    pub top_threshold: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            layer_size: 16,
            top_k: None,
            max_generations: 10,
            target_score: None,
            master_seed: 0,
            mode_weights: ModeWeights::default().0,
            mutation_prob: None,
            elitism: false,
            workers: 0,
            keep_top: 20,
            top_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub geojson_max_points: usize,
    pub geojson_seed: u64,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            geojson_max_points: 10_000,
            geojson_seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load_spec(&self, workdir: &Path) -> Result<ParamSpec> {
        match &self.spec {
            Some(p) => {
                let p = resolve(workdir, p);
                ParamSpec::load(&p).with_context(|| format!("loading parameter spec {}", p.display()))
            }
            None => Ok(ParamSpec::builtin()),
        }
    }

    pub fn staypoint_params(&self) -> Result<StaypointParams> {
        Ok(StaypointParams::new(
            self.staypoints.dist_threshold,
            self.staypoints.time_threshold,
        )?)
    }

    pub fn measure(&self, bbox: Option<BBox>) -> Result<MeasureConfig> {
        Ok(MeasureConfig {
            staypoints: self.staypoint_params()?,
            min_staypoints: self.staypoints.min_staypoints,
            bbox,
            ada_mode: self.staypoints.ada_mode,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let cfg = SimConfig {
            bbox: self.bbox,
            agents: s.agents,
            days: s.days,
            tick: s.tick,
            sample_interval: s.sample_interval,
            start_time: parse_iso(&s.start_time)?,
            record_gps: s.gps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn calib_config(&self, target: MetricSet) -> Result<CalibConfig> {
        let c = &self.calibrate;
        if c.layer_size < 2 {
            bail!("calibrate.layer_size must be at least 2, got {}", c.layer_size);
        }
        let mut weights = ModeWeights(c.mode_weights);
        if let Some(p) = c.mutation_prob {
            weights = weights.with_mutation_prob(p)?;
        }
        let mut sim = self.sim_config()?;
        // calibration always measures the GPS stream
        sim.record_gps = true;
        let cfg = CalibConfig {
            layer_size: c.layer_size,
            top_k: c.top_k.unwrap_or_else(|| default_top_k(c.layer_size)),
            max_generations: c.max_generations,
            target,
            target_score: c.target_score,
            sim,
            measure: self.measure(None)?,
            master_seed: c.master_seed,
            mode_weights: weights,
            elitism: c.elitism,
            workers: c.workers,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `p` itself when absolute, otherwise `p` under `workdir`.
pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Writes the resolved configuration into `dir`.
pub fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}
