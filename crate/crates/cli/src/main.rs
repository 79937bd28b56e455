use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use forge_core::parallel::build_pool;
use forge_core::pipeline::{self, PipelineConfig, PipelineError, Schema, StageFn, StageStats};

#[derive(Parser, Debug)]
#[command(name = "forge", version, about = "Build and score web-agent training data over JSONL")]
struct Args {
    /// TOML configuration; flags override it, it overrides the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for candidate and task-type sampling during synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per logical CPU).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log filter, e.g. `info` or `forge_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct StageArgs {
    /// Input JSONL (defaults to `io.input` from the config).
    input: Option<PathBuf>,
    /// Output JSONL; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Where to write the stage statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Raw trajectory steps to cleaned, id-injected base instances.
    Clean(StageArgs),
    /// Add hard-negative instances.
    Mine(StageArgs),
    /// Add counterfactual rejection instances.
    Perturb(StageArgs),
    /// Generate and consensus-filter synthetic instructions.
    Synthesize(StageArgs),
    /// Build preference pairs from sampled outputs.
    Pair(StageArgs),
    /// Reward predictions and compute evaluation metrics.
    Score(StageArgs),
    /// Render the dataset composition table from stats files.
    Report {
        #[arg(required = true)]
        stats: Vec<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Check every line of a JSONL file against a record schema.
    Validate {
        input: PathBuf,
        /// Schema to enforce; detected per line when omitted.
        #[arg(long, value_enum)]
        schema: Option<SchemaArg>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemaArg {
    RawStep,
    Record,
    Page,
    Synthesis,
    PairInput,
    Pair,
    Step,
}

impl From<SchemaArg> for Schema {
    fn from(arg: SchemaArg) -> Schema {
        match arg {
            SchemaArg::RawStep => Schema::RawStep,
            SchemaArg::Record => Schema::Record,
            SchemaArg::Page => Schema::Page,
            SchemaArg::Synthesis => Schema::Synthesis,
            SchemaArg::PairInput => Schema::PairInput,
            SchemaArg::Pair => Schema::Pair,
            SchemaArg::Step => Schema::Step,
        }
    }
}


fn load_config(args: &Args) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.synthesis.seed = seed;
    }
    if let Some(workers) = args.workers {
        config.parallelism.workers = workers;
    }
    Ok(config)
}

fn open_output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_stats(stats: &StageStats, path: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(stats).context("cannot serialise stats")?;
    if let Some(path) = path {
        std::fs::write(path, format!("{json}\n")).with_context(|| format!("cannot write {}", path.display()))?;
    }
    eprintln!(
        "{:?}: {} lines, {} records written, {} skipped, {} errors",
        stats.stage, stats.lines, stats.records_out, stats.skipped, stats.hard_errors
    );
    Ok(())
}

fn run_stage(stage: StageFn, stage_args: &StageArgs, config: &PipelineConfig) -> anyhow::Result<u8> {
    let input = stage_args
        .input
        .clone()
        .or_else(|| config.io.input.clone())
        .ok_or_else(|| PipelineError::Config("no input file given".into()))?;
    let output = stage_args.output.clone().or_else(|| config.io.output.clone());
    let stats_path = stage_args.stats.clone().or_else(|| config.io.stats.clone());
    let pool = build_pool(config.parallelism.workers).context("cannot start worker pool")?;
    let mut out = open_output(output.as_deref())?;
    let stats = stage(&input, &mut out, config, &pool)?;
    drop(out);
    write_stats(&stats, stats_path.as_deref())?;
    Ok(stats.exit_code() as u8)
}

fn run(args: Args) -> anyhow::Result<u8> {
    let config = load_config(&args)?;
    match &args.command {
        Command::Clean(a) => run_stage(pipeline::run_clean, a, &config),
        Command::Mine(a) => run_stage(pipeline::run_mine, a, &config),
        Command::Perturb(a) => run_stage(pipeline::run_perturb, a, &config),
        Command::Synthesize(a) => run_stage(pipeline::run_synthesize, a, &config),
        Command::Pair(a) => run_stage(pipeline::run_pair, a, &config),
        Command::Score(a) => run_stage(pipeline::run_score, a, &config),
        Command::Report { stats, output } => {
            let table = pipeline::run_report(stats)?;
            let mut out = open_output(output.as_deref())?;
            out.write_all(table.as_bytes())?;
            out.flush()?;
            Ok(0)
        }
        Command::Validate { input, schema } => {
            let pool = build_pool(config.parallelism.workers).context("cannot start worker pool")?;
            let stats = pipeline::run_validate(input, schema.map(Schema::from), &config, &pool)?;
            eprintln!("{} lines checked, {} invalid", stats.lines, stats.hard_errors);
            Ok(stats.exit_code() as u8)
        }
        Command::Config => {
            let text = toml::to_string_pretty(&config).context("cannot render config")?;
            print!("{text}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&args.log).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();

    match run(args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("forge: {err:#}");
            if err.downcast_ref::<PipelineError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
