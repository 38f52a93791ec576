//! `ddfh`: frame selection for multi-instance detection pools.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
//! error.

mod config;
mod output;

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddfh_core::io::{parse_instances, parse_labels, Format, ParseOptions};
use ddfh_core::select::{reduce_and_fuse, run_round, score_pool, ReductionCache, SelectError};
use ddfh_core::{BudgetMode, FrameId, FramePool};
use ddfh_harness::{run_rounds_cached, synth_generate, SimError, Strategy};
use thiserror::Error;

use config::{FileConfig, Overrides, SimulateSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Data { stage: &'static str, message: String },
    #[error("{stage}: internal error: {message}")]
    Internal { stage: &'static str, message: String },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data { .. } => 3,
            CliError::Internal { .. } => 4,
        }
    }

    fn data(stage: &'static str, message: impl ToString) -> Self {
        CliError::Data {
            stage,
            message: message.to_string(),
        }
    }

    fn internal(stage: &'static str, message: impl ToString) -> Self {
        CliError::Internal {
            stage,
            message: message.to_string(),
        }
    }
}

impl From<SelectError> for CliError {
    fn from(e: SelectError) -> Self {
        match &e {
            SelectError::Config(m) => CliError::Config(m.clone()),
            SelectError::NoCandidates => CliError::data("select", e),
            SelectError::Reduce(_) => CliError::data("reduce", e),
            SelectError::Density { .. } => CliError::data("density", e),
            SelectError::Normalize { .. } => CliError::data("scoring", e),
            SelectError::Fusion(_) | SelectError::NotACandidate(_) => CliError::internal("select", e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ddfh", version, about = "Select informative frames from multi-instance detection pools")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project instance embeddings to 2-D with t-SNE.
    Reduce(PoolArgs),
    /// Score every unlabeled candidate frame.
    Score(PoolArgs),
    /// Score and select the next batch of frames to annotate.
    Select(PoolArgs),
    /// Run the annotation loop on synthetic pools.
    Simulate(SimArgs),
}

#[derive(Args, Debug)]
struct Shared {
    /// Config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    /// `frames` or `boxes`.
    #[arg(long)]
    budget_mode: Option<BudgetMode>,
    #[arg(long)]
    stride: Option<usize>,
    /// Minimum detection confidence.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Shared {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            budget: self.budget,
            budget_mode: self.budget_mode,
            stride: self.stride,
            threshold: self.threshold,
        }
    }
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// Instance file (`.csv` or JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Labeled frame ids, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Run a single strategy instead of those in the config.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[command(flatten)]
    shared: Shared,
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::data("input", format!("{}: {e}", path.display())))
}

fn load_pool(args: &PoolArgs, file: &FileConfig) -> Result<FramePool, CliError> {
    let labeled: BTreeSet<FrameId> = match &args.labels {
        Some(path) => parse_labels(open(path)?).map_err(|e| CliError::data("labels", format!("{}: {e}", path.display())))?,
        None => BTreeSet::new(),
    };
    let options = ParseOptions {
        class_count: file.class_count,
    };
    let format = Format::from_path(&args.input);
    parse_instances(open(&args.input)?, format, &labeled, &options)
        .map_err(|e| CliError::data("input", format!("{}: {e}", args.input.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data("output", format!("cannot create {}: {e}", dir.display())))
}

fn reduce(args: &PoolArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.shared.config.as_deref())?;
    let config = file.round_config(&args.shared.overrides())?;
    let pool = load_pool(args, &file)?.filter_by_confidence(config.confidence_threshold);
    create_dir(&args.shared.out)?;
    let fused = reduce_and_fuse(&pool, &config, &mut ReductionCache::default())?;
    let hash = config.digest();
    output::write_coords(&args.shared.out.join("coords.csv"), &hash, &pool, &fused.reduced)?;
    output::write_json(&args.shared.out.join("reduce.json"), &output::Stamped::new(&hash, &fused.tsne))
}

fn score(args: &PoolArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.shared.config.as_deref())?;
    let config = file.round_config(&args.shared.overrides())?;
    let pool = load_pool(args, &file)?;
    create_dir(&args.shared.out)?;
    let scored = score_pool(&pool, &config)?;
    let hash = config.digest();
    output::write_scores(&args.shared.out.join("scores.csv"), &hash, &scored.scores)?;
    output::write_json(&args.shared.out.join("scores.json"), &output::ScoreSidecar::new(&hash, &scored))
}

fn select(args: &PoolArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.shared.config.as_deref())?;
    let config = file.round_config(&args.shared.overrides())?;
    let pool = load_pool(args, &file)?;
    create_dir(&args.shared.out)?;
    let (manifest, scored) = run_round(&pool, &config)?;
    for w in &scored.diagnostics.warnings {
        log::warn!("{w}");
    }
    let hash = config.digest();
    output::write_scores(&args.shared.out.join("scores.csv"), &hash, &scored.scores)?;
    output::write_json(&args.shared.out.join("scores.json"), &output::ScoreSidecar::new(&hash, &scored))?;
    output::write_text(&args.shared.out.join("manifest.json"), &manifest.to_json())?;
    log::info!("selected {} frames", manifest.spent_frames);
    Ok(())
}

fn simulate(args: &SimArgs) -> Result<(), CliError> {
    let Some(path) = args.shared.config.as_deref() else {
        return Err(CliError::Config("simulate needs --config".into()));
    };
    let file = FileConfig::load(Some(path))?;
    let mut sim: SimulateSection = file.simulate.clone().unwrap_or_default();
    if let Some(s) = args.strategy {
        sim.strategies = vec![s];
    }
    if let Some(seed) = args.shared.seed {
        sim.seeds = vec![seed];
    }
    let base = file.round_config(&args.shared.overrides())?;
    let out = &args.shared.out;
    create_dir(&out.join("manifests"))?;

    let hash = output::simulation_digest(&base, &sim);
    let mut table = output::MetricsTable::new(&hash, sim.synth.class_ratios.len());
    for &seed in &sim.seeds {
        let synth = ddfh_harness::SynthConfig {
            seed,
            ..sim.synth.clone()
        };
        let pool = synth_generate(&synth).map_err(|e| CliError::Config(format!("simulate.synth: {e}")))?;
        let config = ddfh_core::RoundConfig { seed, ..base.clone() };
        let mut cache = ReductionCache::default();
        for &strategy in &sim.strategies {
            let run = run_rounds_cached(&pool, strategy, sim.rounds, &config, &mut cache).map_err(|e| match e {
                SimError::Select(e) => CliError::from(e),
                SimError::Pool(e) => CliError::internal("simulate", e),
            })?;
            if run.truncated {
                log::warn!("seed {seed} {strategy}: candidates exhausted after {} rounds", run.rounds.len());
            }
            table.push_run(&run, config.budget_mode);
            for m in &run.manifests {
                let name = format!("round{:03}_{}_seed{}.json", m.round_index + 1, strategy, seed);
                output::write_text(&out.join("manifests").join(name), &m.to_json())?;
            }
        }
    }
    output::write_text(&out.join("metrics.csv"), &table.finish())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Reduce(a) => reduce(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
