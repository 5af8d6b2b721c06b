//! Genetic-algorithm calibration of simulator parameters.
//!
//! Each generation evaluates `layer_size` parameter vectors, scores them
//! against the target metrics, and keeps the `top_k` best as parents. The
//! next generation is built child by child: for every parameter one of five
//! modes is drawn (max, min or mean over the parents, the value of a random
//! parent, or a fresh uniform draw) and applied.
//!
//! All randomness is derived from the master seed, the generation and the
//! candidate index, so a run is a pure function of its configuration and
//! can be resumed from its history file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use log::info;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{similarity, MeasureConfig, MetricSet};
use crate::simulate::{self, ParamEntry, ParamKind, ParamSpec, ParamVector, SimConfig};

const STREAM_GA: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildMode {
    Max,
    Min,
    Mean,
    Pick,
    Mutate,
}

impl ChildMode {
    pub const ALL: [ChildMode; 5] = [
        ChildMode::Max,
        ChildMode::Min,
        ChildMode::Mean,
        ChildMode::Pick,
        ChildMode::Mutate,
    ];
}

/// Relative weights of the five child-construction modes, in
/// [`ChildMode::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeWeights(pub [f64; 5]);

impl Default for ModeWeights {
    fn default() -> Self {
        ModeWeights([1.0; 5])
    }
}

impl ModeWeights {
    pub fn only(mode: ChildMode) -> Self {
        let mut w = [0.0; 5];
        w[mode as usize] = 1.0;
        ModeWeights(w)
    }

    /// Rescales so that mutation has probability `p` and the other modes
    /// share `1 - p` in their current proportions.
    pub fn with_mutation_prob(self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("mutation probability {p} outside [0, 1]")));
        }
        let rest: f64 = self.0[..4].iter().sum();
        let mut w = [0.0; 5];
        if rest > 0.0 {
            for (dst, src) in w.iter_mut().zip(&self.0[..4]) {
                *dst = src / rest * (1.0 - p);
            }
        } else if p < 1.0 {
            w[..4].fill((1.0 - p) / 4.0);
        }
        w[4] = p;
        Ok(ModeWeights(w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "mode weights must be finite, non-negative and not all zero: {:?}",
                self.0
            )));
        }
        Ok(())
    }

    fn sampler(&self) -> Result<WeightedIndex<f64>> {
        self.validate()?;
        WeightedIndex::new(self.0).map_err(|e| Error::Config(format!("mode weights: {e}")))
    }
}

fn sample_entry<R: Rng + ?Sized>(e: &ParamEntry, rng: &mut R) -> f64 {
    match e.kind {
        ParamKind::Continuous => rng.random_range(e.min..=e.max),
        ParamKind::Integer => rng.random_range(e.min.ceil() as i64..=e.max.floor() as i64) as f64,
    }
}

/// Uniform draw from every entry's range.
pub fn sample_params<R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> ParamVector {
    ParamVector {
        values: spec.entries().iter().map(|e| sample_entry(e, rng)).collect(),
    }
}

/// Builds one child from `parents`, choosing a mode independently per
/// parameter.
pub fn make_child<R: Rng + ?Sized>(
    parents: &[ParamVector],
    spec: &ParamSpec,
    weights: &ModeWeights,
    rng: &mut R,
) -> Result<ParamVector> {
    if parents.len() < 2 {
        return Err(Error::Config(format!("need at least 2 parents, got {}", parents.len())));
    }
    for p in parents {
        p.validate(spec)?;
    }
    let modes = weights.sampler()?;
    let values = spec
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let column = parents.iter().map(|p| p.values[i]);
            let v = match ChildMode::ALL[modes.sample(rng)] {
                ChildMode::Max => column.fold(f64::NEG_INFINITY, f64::max),
                ChildMode::Min => column.fold(f64::INFINITY, f64::min),
                ChildMode::Mean => {
                    // offset form is exact when all parents agree
                    let base = parents[0].values[i];
                    base + column.map(|x| x - base).sum::<f64>() / parents.len() as f64
                }
                ChildMode::Pick => parents[rng.random_range(0..parents.len())].values[i],
                ChildMode::Mutate => sample_entry(e, rng),
            };
            e.clamp(v)
        })
        .collect();
    Ok(ParamVector { values })
}

/// Something that turns a parameter vector into metrics.
pub trait Evaluator: Sync {
    fn evaluate(&self, params: &ParamVector, seed: u64) -> Result<MetricSet>;
}

/// Builds a world, simulates it and measures the GPS stream.
#[derive(Debug, Clone)]
pub struct SimEvaluator {
    pub spec: ParamSpec,
    pub sim: SimConfig,
    pub measure: MeasureConfig,
}

impl Evaluator for SimEvaluator {
    fn evaluate(&self, params: &ParamVector, seed: u64) -> Result<MetricSet> {
        let out = simulate::run(&self.spec, params, &self.sim, seed)?;
        simulate::sim_metrics(&out, &self.measure)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulation seed for candidate `index` of `generation`.
pub fn candidate_seed(master_seed: u64, generation: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ generation as u64) ^ (index as u64).wrapping_add(1 << 32))
}

/// Generator used to build the candidates of `generation`.
pub fn generation_rng(master_seed: u64, generation: usize) -> ChaCha8Rng {
    simulate::rng(splitmix64(splitmix64(master_seed) ^ generation as u64), STREAM_GA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub layer_size: usize,
    pub top_k: usize,
    /// generations to run including the initial one; 0 means unbounded
    pub max_generations: usize,
    pub target: MetricSet,
    /// stop once the best score reaches this value
    pub target_score: Option<f64>,
    pub sim: SimConfig,
    pub measure: MeasureConfig,
    pub master_seed: u64,
    pub mode_weights: ModeWeights,
    /// carry the best vector so far into every new generation
    pub elitism: bool,
    /// worker threads for candidate evaluation; 0 uses all cores
    pub workers: usize,
}

impl CalibConfig {
    pub fn new(layer_size: usize, target: MetricSet) -> Self {
        Self {
            layer_size,
            top_k: default_top_k(layer_size),
            max_generations: 10,
            target,
            target_score: None,
            sim: SimConfig::default(),
            measure: MeasureConfig::default(),
            master_seed: 0,
            mode_weights: ModeWeights::default(),
            elitism: false,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 2 || self.top_k > self.layer_size {
            return Err(Error::Config(format!(
                "need 2 <= top_k <= layer_size, got top_k {} with layer size {}",
                self.top_k, self.layer_size
            )));
        }
        self.mode_weights.validate()?;
        similarity(&self.target, &self.target)?;
        self.sim.validate()?;
        self.measure.staypoints.validate()
    }
}

pub fn default_top_k(layer_size: usize) -> usize {
    (layer_size / 4).max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub seed: u64,
    pub params: ParamVector,
    pub metrics: Option<MetricSet>,
    /// `None` for failed evaluations, which rank below every score
    pub score: Option<f64>,
    pub failure: Option<String>,
}

impl CandidateRecord {
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub generation: usize,
    pub index: usize,
    pub params: ParamVector,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub candidates: Vec<CandidateRecord>,
    pub parents: Vec<usize>,
    pub best_so_far: BestRecord,
}

/// Indices of the `top_k` highest scores; ties go to the lower index and
/// failures are never selected.
pub fn select_parents(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    order
}

/// Evaluates one generation. Results are ordered by candidate index
/// regardless of which worker finished first.
pub fn run_generation<E: Evaluator + ?Sized>(
    generation: usize,
    candidates: Vec<ParamVector>,
    cfg: &CalibConfig,
    evaluator: &E,
    previous_best: Option<&BestRecord>,
) -> Result<GenerationRecord> {
    if candidates.len() != cfg.layer_size {
        return Err(Error::Config(format!(
            "generation {generation} has {} candidates, expected {}",
            candidates.len(),
            cfg.layer_size
        )));
    }
    let records: Vec<CandidateRecord> = candidates
        .into_par_iter()
        .enumerate()
        .map(|(index, params)| {
            let seed = candidate_seed(cfg.master_seed, generation, index);
            let outcome = evaluator
                .evaluate(&params, seed)
                .and_then(|m| similarity(&cfg.target, &m).map(|s| (m, s.value())));
            match outcome {
                Ok((m, s)) if s.is_finite() => CandidateRecord {
                    index,
                    seed,
                    params,
                    metrics: Some(m),
                    score: Some(s),
                    failure: None,
                },
                Ok((m, s)) => CandidateRecord {
                    index,
                    seed,
                    params,
                    metrics: Some(m),
                    score: None,
                    failure: Some(format!("non-finite score {s}")),
                },
                Err(e) => CandidateRecord {
                    index,
                    seed,
                    params,
                    metrics: None,
                    score: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();

    let scores: Vec<f64> = records.iter().map(CandidateRecord::rank_score).collect();
    let parents = select_parents(&scores, cfg.top_k);
    let Some(&leader) = parents.first() else {
        let diagnostic = records
            .iter()
            .map(|r| format!("#{}: {}", r.index, r.failure.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::GenerationCollapse {
            generation,
            count: records.len(),
            diagnostic,
        });
    };
    let challenger = BestRecord {
        generation,
        index: leader,
        params: records[leader].params.clone(),
        score: scores[leader],
    };
    let best_so_far = match previous_best {
        Some(prev) if prev.score >= challenger.score => prev.clone(),
        _ => challenger,
    };
    Ok(GenerationRecord {
        generation,
        candidates: records,
        parents,
        best_so_far,
    })
}

/// Candidates for the generation after `prev`.
pub fn next_candidates(prev: &GenerationRecord, spec: &ParamSpec, cfg: &CalibConfig) -> Result<Vec<ParamVector>> {
    let mut parents: Vec<ParamVector> = prev
        .parents
        .iter()
        .map(|&i| prev.candidates[i].params.clone())
        .collect();
    if parents.len() == 1 {
        parents.push(parents[0].clone());
    }
    let mut rng = generation_rng(cfg.master_seed, prev.generation + 1);
    let mut out = Vec::with_capacity(cfg.layer_size);
    if cfg.elitism {
        out.push(prev.best_so_far.params.clone());
    }
    while out.len() < cfg.layer_size {
        out.push(make_child(&parents, spec, &cfg.mode_weights, &mut rng)?);
    }
    Ok(out)
}

pub fn initial_candidates(spec: &ParamSpec, cfg: &CalibConfig) -> Vec<ParamVector> {
    let mut rng = generation_rng(cfg.master_seed, 0);
    (0..cfg.layer_size).map(|_| sample_params(spec, &mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct CalibResult {
    pub best: BestRecord,
    pub history: Vec<GenerationRecord>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxGenerations,
    TargetScore,
    Interrupted,
}

/// Identifies the configuration a history file belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryHeader {
    spec_hash: String,
    config: CalibConfig,
}

fn same_run(a: &CalibConfig, b: &CalibConfig) -> bool {
    // stop conditions and worker count may change between resumes
    let strip = |c: &CalibConfig| CalibConfig {
        max_generations: 0,
        target_score: None,
        workers: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Reads a history file written by [`calibrate`].
pub fn read_history(path: &Path, spec: &ParamSpec, cfg: &CalibConfig) -> Result<Vec<GenerationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: HistoryHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)?,
        None => return Ok(Vec::new()),
    };
    if header.spec_hash != spec.hash() || !same_run(&header.config, cfg) {
        return Err(Error::Checkpoint(format!(
            "{} belongs to a different calibration configuration",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line)?;
        if rec.generation != out.len() {
            return Err(Error::Checkpoint(format!(
                "expected generation {}, found {}",
                out.len(),
                rec.generation
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes the header and all records to a temporary file, then renames it
/// over `path`.
pub fn write_history(path: &Path, spec: &ParamSpec, cfg: &CalibConfig, history: &[GenerationRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = HistoryHeader {
            spec_hash: spec.hash(),
            config: cfg.clone(),
        };
        let io = |e| Error::io(&tmp, e);
        writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
        for rec in history {
            writeln!(w, "{}", serde_json::to_string(rec)?).map_err(io)?;
        }
        w.flush().map_err(io)?;
        w.get_ref().sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs the generational loop until a stop condition holds. With a
/// `checkpoint` path, history is saved after each generation and an
/// existing file is resumed from.
pub fn calibrate<E: Evaluator + ?Sized>(
    cfg: &CalibConfig,
    spec: &ParamSpec,
    evaluator: &E,
    checkpoint: Option<&Path>,
    stop: &AtomicBool,
) -> Result<CalibResult> {
    cfg.validate()?;
    let mut history = match checkpoint {
        Some(path) if path.exists() => read_history(path, spec, cfg)?,
        _ => Vec::new(),
    };
    if !history.is_empty() {
        info!("resuming calibration at generation {}", history.len());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let reached = |history: &[GenerationRecord]| -> Option<StopReason> {
        let last = history.last()?;
        if cfg.target_score.is_some_and(|t| last.best_so_far.score >= t) {
            Some(StopReason::TargetScore)
        } else if cfg.max_generations > 0 && history.len() >= cfg.max_generations {
            Some(StopReason::MaxGenerations)
        } else {
            None
        }
    };

    let stop_reason = loop {
        if let Some(reason) = reached(&history) {
            break reason;
        }
        if stop.load(Ordering::SeqCst) {
            break StopReason::Interrupted;
        }
        let generation = history.len();
        let candidates = match history.last() {
            None => initial_candidates(spec, cfg),
            Some(prev) => next_candidates(prev, spec, cfg)?,
        };
        let previous_best = history.last().map(|r| &r.best_so_far);
        let record = pool.install(|| run_generation(generation, candidates, cfg, evaluator, previous_best))?;
        info!(
            "generation {generation}: best {:.4}, best so far {:.4}, failures {}",
            record.candidates[record.parents[0]].rank_score(),
            record.best_so_far.score,
            record.candidates.iter().filter(|c| c.score.is_none()).count()
        );
        history.push(record);
        if let Some(path) = checkpoint {
            write_history(path, spec, cfg, &history)?;
        }
    };

    let best = history
        .last()
        .map(|r| r.best_so_far.clone())
        .ok_or_else(|| Error::Checkpoint("calibration stopped before the first generation".into()))?;
    Ok(CalibResult {
        best,
        history,
        stop_reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopConfig {
    pub rank: usize,
    pub score: f64,
    pub generation: usize,
    pub index: usize,
    pub seed: u64,
    pub metrics: MetricSet,
    pub params: std::collections::BTreeMap<String, f64>,
}

/// The best configurations over a whole calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsTop {
    pub spec_hash: String,
    pub threshold: f64,
    /// evaluations across all generations scoring above `threshold`
    pub above_threshold: usize,
    pub configs: Vec<TopConfig>,
}

pub fn params_top(history: &[GenerationRecord], spec: &ParamSpec, keep: usize, threshold: f64) -> ParamsTop {
    let mut all: Vec<(&GenerationRecord, &CandidateRecord)> = history
        .iter()
        .flat_map(|g| g.candidates.iter().map(move |c| (g, c)))
        .filter(|(_, c)| c.score.is_some() && c.metrics.is_some())
        .collect();
    all.sort_by(|a, b| {
        b.1.rank_score()
            .total_cmp(&a.1.rank_score())
            .then(a.0.generation.cmp(&b.0.generation))
            .then(a.1.index.cmp(&b.1.index))
    });
    let above_threshold = all.iter().filter(|(_, c)| c.rank_score() > threshold).count();
    let configs = all
        .into_iter()
        .take(keep)
        .enumerate()
        .map(|(rank, (g, c))| TopConfig {
            rank: rank + 1,
            score: c.rank_score(),
            generation: g.generation,
            index: c.index,
            seed: c.seed,
            metrics: c.metrics.expect("filtered above"),
            params: c.params.to_map(spec),
        })
        .collect();
    ParamsTop {
        spec_hash: spec.hash(),
        threshold,
        above_threshold,
        configs,
    }
}
