mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Staypoint geo-statistics, mobility simulation and GA calibration.
#[derive(Debug, Parser)]
#[command(name = "trajcal", version, about)]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a raw GeoLife-style dataset, crop it to the bounding box and
    /// write canonical GPS TSV plus a load report.
    Ingest(IngestArgs),
    /// Extract staypoints and trips and compute the four statistics.
    Metrics(MetricsArgs),
    /// Build a world, run the simulator and export the dataset.
    Simulate(SimulateArgs),
    /// Fit simulator parameters to target statistics.
    Calibrate(CalibrateArgs),
    /// Compare dataset directories against a target in one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct BBoxArgs {
    /// min_lat,min_lon,max_lat,max_lon
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: Option<String>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Staypoint roaming distance, meters.
    #[arg(long)]
    pub dist_threshold: Option<f64>,
    /// Minimum staypoint duration, seconds.
    #[arg(long)]
    pub time_threshold: Option<i64>,
    /// Users with fewer staypoints are left out of the statistics.
    #[arg(long)]
    pub min_staypoints: Option<usize>,
    /// `active-days` or `span-days`.
    #[arg(long, value_parser = parse_ada_mode)]
    pub ada_mode: Option<trajcal_core::metrics::AdaMode>,
}

fn parse_ada_mode(s: &str) -> Result<trajcal_core::metrics::AdaMode, String> {
    use trajcal_core::metrics::AdaMode;
    match s.replace('_', "-").as_str() {
        "active-days" => Ok(AdaMode::ActiveDays),
        "span-days" => Ok(AdaMode::SpanDays),
        _ => Err(format!("unknown ADA mode `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Dataset root (`<user>/Trajectory/*.plt` or flat `<user>.plt`).
    pub source: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bbox: BBoxArgs,
    /// Keep points outside the bounding box.
    #[arg(long, conflicts_with = "bbox")]
    pub no_bbox: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// `gps.tsv`, a directory containing one, or a raw dataset root.
    pub input: PathBuf,
    /// Also write staypoints, trips and a report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label used in reports; defaults to the input name.
    #[arg(long)]
    pub label: Option<String>,
    /// Score against this target (see `report --target`).
    #[arg(long)]
    pub target: Option<String>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub bbox: BBoxArgs,
    /// Do not crop to the bounding box.
    #[arg(long, conflicts_with = "bbox")]
    pub no_bbox: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Parameter values (JSON or TOML map of name to value); unspecified
    /// names take spec defaults.
    #[arg(long, conflicts_with_all = ["params_top", "run_meta"])]
    pub params: Option<PathBuf>,
    /// A params.top.json written by `calibrate`.
    #[arg(long, conflicts_with = "run_meta")]
    pub params_top: Option<PathBuf>,
    /// 1-based entry of `--params-top`.
    #[arg(long, default_value_t = 1, requires = "params_top")]
    pub rank: usize,
    /// Regenerate the run recorded in this run_meta.json exactly.
    #[arg(long, conflicts_with_all = ["agents", "days", "seed", "gps", "no_gps"])]
    pub run_meta: Option<PathBuf>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record and write the GPS stream.
    #[arg(long, conflicts_with = "no_gps")]
    pub gps: bool,
    /// Skip the GPS stream; statistics come from the dwell records.
    #[arg(long)]
    pub no_gps: bool,
    /// Score against this target (see `report --target`).
    #[arg(long)]
    pub target: Option<String>,
    /// Label used in reports; defaults to `<agents>-<days>d`.
    #[arg(long)]
    pub label: Option<String>,
    /// Also write staypoints.geojson.
    #[arg(long)]
    pub geojson: bool,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Target statistics (see `report --target`).
    #[arg(long)]
    pub target: String,
    /// Output directory; an existing history.jsonl there is resumed.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub layer_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Generations including the initial one; 0 runs until interrupted.
    #[arg(long)]
    pub generations: Option<usize>,
    /// Stop once the best score reaches this value.
    #[arg(long)]
    pub target_score: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub mutation_prob: Option<f64>,
    /// Carry the best vector into each new generation.
    #[arg(long)]
    pub elitism: bool,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `geolife` for the published GeoLife statistics, a dataset
    /// directory, a report.json, or a JSON file with adt/ada/mxd/mdd.
    #[arg(long)]
    pub target: String,
    /// Name of the target row; inferred when omitted.
    #[arg(long)]
    pub target_label: Option<String>,
    /// Dataset directory to compare (repeatable, kept in order).
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Table file; `.tsv` for tab-separated, otherwise markdown.
    #[arg(long)]
    pub out: PathBuf,
    /// Write staypoints.geojson into each dataset directory.
    #[arg(long)]
    pub geojson: bool,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
