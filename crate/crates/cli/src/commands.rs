use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use trajcal_core::calibrate::{self, params_top, SimEvaluator, StopReason};
use trajcal_core::export::{
    self, read_report, write_comparison_table, write_dataset, write_geojson, DatasetReport, Formats, GpsSource,
    Products, TableRow,
};
use trajcal_core::geodata::{filter_bbox, load_dataset, read_gps_tsv, write_gps_tsv, BBox, Dataset, LoadReport};
use trajcal_core::metrics::{measure_dataset, measure_staypoints, similarity, InfoStats, MeasureConfig, MetricSet};
use trajcal_core::simulate::{self, ParamSpec, ParamVector, RunMeta, SimOutput};
use trajcal_core::staypoints::{group_by_user, read_staypoints_tsv, StayPoint};

use crate::config::{echo, resolve, RunConfig};
use crate::{CalibrateArgs, Cli, Command, IngestArgs, MetricsArgs, ReportArgs, SimulateArgs, ThresholdArgs};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const PARAMS_TOP_FILE: &str = "params.top.json";
pub const LOAD_REPORT_FILE: &str = "load_report.json";
pub const INFO_FILE: &str = "info.json";

/// Exit status after an interrupted calibration.
const EXIT_INTERRUPTED: u8 = 130;

struct Ctx {
    workdir: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.workdir, p)
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config_path = cli.config.as_ref().map(|p| resolve(&cli.workdir, p));
    let cfg = RunConfig::load(config_path.as_deref())?;
    let mut ctx = Ctx {
        workdir: cli.workdir,
        cfg,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&mut ctx, a),
        Command::Metrics(a) => metrics(&mut ctx, a),
        Command::Simulate(a) => simulate_cmd(&mut ctx, a),
        Command::Calibrate(a) => calibrate_cmd(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
    }
}

fn apply_thresholds(cfg: &mut RunConfig, t: &ThresholdArgs) {
    let s = &mut cfg.staypoints;
    if let Some(v) = t.dist_threshold {
        s.dist_threshold = v;
    }
    if let Some(v) = t.time_threshold {
        s.time_threshold = v;
    }
    if let Some(v) = t.min_staypoints {
        s.min_staypoints = v;
    }
    if let Some(v) = t.ada_mode {
        s.ada_mode = v;
    }
}

fn apply_bbox(cfg: &mut RunConfig, bbox: &Option<String>) -> Result<()> {
    if let Some(b) = bbox {
        cfg.bbox = b.parse::<BBox>()?;
    }
    cfg.bbox.validate()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn label_of(p: &Path) -> String {
    p.file_stem()
        .or_else(|| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Resolves a target designation to a label and metrics. Accepts
/// `geolife`, a dataset directory, a report.json, or a JSON MetricSet.
fn load_target(ctx: &Ctx, target: &str) -> Result<(String, MetricSet)> {
    let (label, m) = if target.eq_ignore_ascii_case("geolife") {
        ("GeoLife".to_string(), MetricSet::GEOLIFE)
    } else {
        let path = ctx.path(Path::new(target));
        if path.is_dir() {
            let r = read_report(&path).with_context(|| format!("target {}", path.display()))?;
            let m = r
                .metrics
                .ok_or_else(|| anyhow!("target dataset {} has no statistics", path.display()))?;
            (r.label, m)
        } else {
            let text = fs::read_to_string(&path).with_context(|| format!("reading target {}", path.display()))?;
            if let Ok(r) = serde_json::from_str::<DatasetReport>(&text) {
                let m = r
                    .metrics
                    .ok_or_else(|| anyhow!("target report {} has no statistics", path.display()))?;
                (r.label, m)
            } else {
                let m: MetricSet = serde_json::from_str(&text)
                    .with_context(|| format!("target {} is neither a report nor adt/ada/mxd/mdd", path.display()))?;
                (label_of(&path), m)
            }
        }
    };
    m.validate()?;
    similarity(&m, &m).context("target statistics must all be positive")?;
    Ok((label, m))
}

#[derive(Serialize)]
struct IngestReport<'a> {
    load: &'a LoadReport,
    bbox: Option<BBox>,
    users: usize,
    points: usize,
    points_outside_bbox: usize,
}

fn ingest(ctx: &mut Ctx, a: IngestArgs) -> Result<ExitCode> {
    apply_bbox(&mut ctx.cfg, &a.bbox.bbox)?;
    let source = ctx.path(&a.source);
    let out = ctx.path(&a.out);
    let (raw, load) = load_dataset(&source).with_context(|| format!("loading {}", source.display()))?;
    for w in &load.warnings {
        warn!("{w}");
    }
    if load.record_errors > 0 {
        warn!("{} malformed records dropped", load.record_errors);
    }
    let bbox = (!a.no_bbox).then_some(ctx.cfg.bbox);
    let ds = match &bbox {
        Some(b) => filter_bbox(&raw, b),
        None => raw.clone(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let gps_path = out.join(export::GPS_FILE);
    let file = fs::File::create(&gps_path).with_context(|| format!("writing {}", gps_path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_gps_tsv(&mut w, ds.trajectories())
        .and_then(|_| std::io::Write::flush(&mut w))
        .with_context(|| format!("writing {}", gps_path.display()))?;
    let report = IngestReport {
        load: &load,
        bbox,
        users: ds.n_users(),
        points: ds.n_points(),
        points_outside_bbox: raw.n_points() - ds.n_points(),
    };
    write_json(&out.join(LOAD_REPORT_FILE), &report)?;
    echo(&ctx.cfg, &out)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn read_input(path: &Path) -> Result<Dataset> {
    let gps = if path.is_dir() {
        path.join(export::GPS_FILE)
    } else {
        path.to_path_buf()
    };
    if gps.is_file() {
        return Ok(read_gps_tsv(&gps)?);
    }
    let (ds, load) = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    for w in &load.warnings {
        warn!("{w}");
    }
    Ok(ds)
}

#[derive(Serialize)]
struct MetricsOutput {
    label: String,
    metrics: MetricSet,
    score_vs_target: Option<f64>,
    info: InfoStats,
}

fn metrics(ctx: &mut Ctx, a: MetricsArgs) -> Result<ExitCode> {
    apply_thresholds(&mut ctx.cfg, &a.thresholds);
    apply_bbox(&mut ctx.cfg, &a.bbox.bbox)?;
    let started = Instant::now();
    let input = ctx.path(&a.input);
    let ds = read_input(&input)?;
    let measure = ctx.cfg.measure((!a.no_bbox).then_some(ctx.cfg.bbox))?;
    let m = measure_dataset(&ds, &measure);
    let metrics = m
        .metrics(measure.ada_mode)
        .with_context(|| format!("no trips among users with at least {} staypoints", measure.min_staypoints))?;
    let target = a.target.as_deref().map(|t| load_target(ctx, t)).transpose()?;
    let label = a.label.unwrap_or_else(|| label_of(&input));
    let score = target
        .as_ref()
        .map(|(_, t)| similarity(t, &metrics).map(|s| s.value()))
        .transpose()?;
    if let Some(out) = &a.out {
        let out = ctx.path(out);
        let staypoints: Vec<_> = m.active_staypoints().cloned().collect();
        let products = Products {
            label: label.clone(),
            staypoints: &staypoints,
            gps: GpsSource::None,
            run_meta: None,
            metrics: Some(metrics),
            target: target.as_ref().map(|(_, t)| *t),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let formats = Formats {
            gps: false,
            run_meta: false,
            ..Formats::default()
        };
        write_dataset(&products, &out, formats)?;
        write_json(&out.join(INFO_FILE), &m.info)?;
        echo(&ctx.cfg, &out)?;
    }
    print_json(&MetricsOutput {
        label,
        metrics,
        score_vs_target: score,
        info: m.info,
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Spec defaults overlaid with the name→value map in `path`.
fn load_params(spec: &ParamSpec, path: &Path) -> Result<ParamVector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let given: std::collections::BTreeMap<String, f64> = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    let mut map = spec.defaults().to_map(spec);
    map.extend(given);
    ParamVector::from_map(spec, &map).with_context(|| format!("parameters in {}", path.display()))
}

/// Parameters and evaluation seed of entry `rank` of a params.top.json.
fn load_params_top(spec: &ParamSpec, path: &Path, rank: usize) -> Result<(ParamVector, u64)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let top: calibrate::ParamsTop = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if top.spec_hash != spec.hash() {
        bail!("{} was produced with a different parameter spec", path.display());
    }
    let entry = rank
        .checked_sub(1)
        .and_then(|i| top.configs.get(i))
        .ok_or_else(|| anyhow!("{} has {} entries, rank {rank} requested", path.display(), top.configs.len()))?;
    Ok((ParamVector::from_map(spec, &entry.params)?, entry.seed))
}

/// Dwell records held at least as long as the staypoint time threshold,
/// which is what detection on the GPS stream would keep.
fn dwells(sps: &[StayPoint], measure: &MeasureConfig) -> BTreeMap<String, Vec<StayPoint>> {
    let t = measure.staypoints.time_threshold;
    group_by_user(sps.iter().filter(|sp| sp.depart - sp.arrive >= t))
}

/// Statistics of a run: from the GPS stream when recorded, otherwise from
/// the dwell records.
fn run_metrics(out: &SimOutput, ctx: &Ctx) -> Result<MetricSet> {
    let measure = ctx.cfg.measure(None)?;
    let m = if out.gps.is_some() {
        simulate::measure_output(out, &measure)?
    } else {
        measure_staypoints(dwells(&out.staypoints, &measure), measure.min_staypoints)
    };
    Ok(m.metrics(measure.ada_mode)?)
}

fn simulate_cmd(ctx: &mut Ctx, a: SimulateArgs) -> Result<ExitCode> {
    apply_thresholds(&mut ctx.cfg, &a.thresholds);
    let spec = ctx.cfg.load_spec(&ctx.workdir)?;
    let started = Instant::now();
    let out = if let Some(meta_path) = &a.run_meta {
        let meta_path = ctx.path(meta_path);
        let text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
        let meta: RunMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;
        let c = &meta.config;
        ctx.cfg.bbox = c.bbox;
        ctx.cfg.sim.agents = c.agents;
        ctx.cfg.sim.days = c.days;
        ctx.cfg.sim.tick = c.tick;
        ctx.cfg.sim.sample_interval = c.sample_interval;
        ctx.cfg.sim.start_time = trajcal_core::geodata::format_iso(c.start_time);
        ctx.cfg.sim.gps = c.record_gps;
        ctx.cfg.sim.seed = meta.seed;
        simulate::rerun(&spec, &meta)?
    } else {
        let params = match (&a.params, &a.params_top) {
            (Some(p), _) => load_params(&spec, &ctx.path(p))?,
            (None, Some(p)) => {
                let (v, seed) = load_params_top(&spec, &ctx.path(p), a.rank)?;
                // the evaluated run is reproduced unless a seed is given
                ctx.cfg.sim.seed = seed;
                v
            }
            (None, None) => spec.defaults(),
        };
        let s = &mut ctx.cfg.sim;
        if let Some(v) = a.agents {
            s.agents = v;
        }
        if let Some(v) = a.days {
            s.days = v;
        }
        if let Some(v) = a.seed {
            s.seed = v;
        }
        if a.gps {
            s.gps = true;
        }
        if a.no_gps {
            s.gps = false;
        }
        let sim = ctx.cfg.sim_config()?;
        info!("simulating {} agents for {} days", sim.agents, sim.days);
        simulate::run(&spec, &params, &sim, ctx.cfg.sim.seed)?
    };
    let elapsed = started.elapsed().as_secs_f64();
    let metrics = match run_metrics(&out, ctx) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("statistics unavailable: {e:#}");
            None
        }
    };
    let target = a.target.as_deref().map(|t| load_target(ctx, t)).transpose()?;
    let label = a
        .label
        .unwrap_or_else(|| format!("{}-{}d", out.meta.config.agents, out.meta.config.days));
    let dir = ctx.path(&a.out);
    let products = Products {
        label,
        staypoints: &out.staypoints,
        gps: out.gps.as_deref().map_or(GpsSource::None, GpsSource::Tracks),
        run_meta: Some(&out.meta),
        metrics,
        target: target.map(|(_, t)| t),
        wall_clock_seconds: elapsed,
    };
    let report = write_dataset(&products, &dir, Formats::default())?;
    if a.geojson {
        write_geojson(
            &out.staypoints,
            &dir,
            ctx.cfg.export.geojson_max_points,
            ctx.cfg.export.geojson_seed,
        )?;
    }
    echo(&ctx.cfg, &dir)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CalibrateSummary {
    generations: usize,
    stop_reason: StopReason,
    best_score: f64,
    best_generation: usize,
    evaluations: usize,
    failures: usize,
    above_threshold: usize,
}

fn calibrate_cmd(ctx: &mut Ctx, a: CalibrateArgs) -> Result<ExitCode> {
    apply_thresholds(&mut ctx.cfg, &a.thresholds);
    let (label, target) = load_target(ctx, &a.target)?;
    info!("calibrating against {label}");
    let c = &mut ctx.cfg.calibrate;
    if let Some(v) = a.layer_size {
        c.layer_size = v;
    }
    if let Some(v) = a.top_k {
        c.top_k = Some(v);
    }
    if let Some(v) = a.generations {
        c.max_generations = v;
    }
    if let Some(v) = a.target_score {
        c.target_score = Some(v);
    }
    if let Some(v) = a.seed {
        c.master_seed = v;
    }
    if let Some(v) = a.workers {
        c.workers = v;
    }
    if let Some(v) = a.mutation_prob {
        c.mutation_prob = Some(v);
    }
    if a.elitism {
        c.elitism = true;
    }
    if let Some(v) = a.agents {
        ctx.cfg.sim.agents = v;
    }
    if let Some(v) = a.days {
        ctx.cfg.sim.days = v;
    }
    ctx.cfg.sim.gps = true;
    let spec = ctx.cfg.load_spec(&ctx.workdir)?;
    let ccfg = ctx.cfg.calib_config(target)?;
    let evaluator = SimEvaluator {
        spec: spec.clone(),
        sim: ccfg.sim,
        measure: ccfg.measure,
    };
    let dir = ctx.path(&a.out);
    echo(&ctx.cfg, &dir)?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || {
        flag.store(true, Ordering::SeqCst);
        eprintln!("interrupt received; stopping after the current generation");
    }) {
        warn!("cannot install interrupt handler: {e}");
    }

    let history = dir.join(HISTORY_FILE);
    let result = calibrate::calibrate(&ccfg, &spec, &evaluator, Some(&history), &stop)?;
    let top = params_top(
        &result.history,
        &spec,
        ctx.cfg.calibrate.keep_top,
        ctx.cfg.calibrate.top_threshold,
    );
    write_json(&dir.join(PARAMS_TOP_FILE), &top)?;
    let evaluations = result.history.iter().map(|g| g.candidates.len()).sum();
    let failures = result
        .history
        .iter()
        .flat_map(|g| &g.candidates)
        .filter(|c| c.score.is_none())
        .count();
    print_json(&CalibrateSummary {
        generations: result.history.len(),
        stop_reason: result.stop_reason,
        best_score: result.best.score,
        best_generation: result.best.generation,
        evaluations,
        failures,
        above_threshold: top.above_threshold,
    })?;
    Ok(match result.stop_reason {
        StopReason::Interrupted => ExitCode::from(EXIT_INTERRUPTED),
        _ => ExitCode::SUCCESS,
    })
}

/// Label and statistics of a dataset directory. Statistics missing from
/// the report are recomputed from its staypoints.
fn dataset_row(ctx: &Ctx, dir: &Path) -> Result<TableRow> {
    let report = if dir.join(export::REPORT_FILE).is_file() {
        Some(read_report(dir)?)
    } else {
        None
    };
    let label = report.as_ref().map_or_else(|| label_of(dir), |r| r.label.clone());
    if let Some(m) = report.and_then(|r| r.metrics) {
        return Ok(TableRow {
            label,
            metrics: Some(m),
        });
    }
    let sps = read_staypoints_tsv(&dir.join(export::STAYPOINTS_FILE))?;
    let measure = ctx.cfg.measure(None)?;
    let metrics = match measure_staypoints(dwells(&sps, &measure), measure.min_staypoints).metrics(measure.ada_mode) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("{}: {e}", dir.display());
            None
        }
    };
    Ok(TableRow { label, metrics })
}

fn report(ctx: &mut Ctx, a: ReportArgs) -> Result<ExitCode> {
    apply_thresholds(&mut ctx.cfg, &a.thresholds);
    let (label, target) = load_target(ctx, &a.target)?;
    let label = a.target_label.unwrap_or(label);
    let dirs: Vec<PathBuf> = a.datasets.iter().map(|d| ctx.path(d)).collect();
    let rows = dirs
        .iter()
        .map(|d| dataset_row(ctx, d).with_context(|| format!("dataset {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let out = ctx.path(&a.out);
    write_comparison_table(&label, &target, &rows, &out)?;
    if a.geojson {
        for d in &dirs {
            let sps = read_staypoints_tsv(&d.join(export::STAYPOINTS_FILE))?;
            let p = write_geojson(
                &sps,
                d,
                ctx.cfg.export.geojson_max_points,
                ctx.cfg.export.geojson_seed,
            )?;
            info!("wrote {}", p.display());
        }
    }
    if let Some(parent) = out.parent() {
        echo(&ctx.cfg, parent)?;
    }
    print!("{}", fs::read_to_string(&out)?);
    Ok(ExitCode::SUCCESS)
}
