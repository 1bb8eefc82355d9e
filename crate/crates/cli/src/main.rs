use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lungtrack_core::config::PipelineConfig;
use lungtrack_core::pipeline::{dry_run, run_stage, RunOptions, Stage};
use lungtrack_core::Error;

/// Respiratory motion subspaces and single-radiograph motion inference.
#[derive(Debug, Parser)]
#[command(name = "lungtrack", version)]
struct Cli {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Print the artifacts the stage would read and write, then stop.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the analytic breathing phantom and its true motion.
    Phantom,
    /// Rank-constrained registration of the phase series to the reference.
    Register,
    /// Fit the motion subspace and report explained variance.
    Subspace,
    /// Render the labelled radiograph corpus.
    Gendata,
    /// Train the regressor.
    Train,
    /// Infer subspace weights from one radiograph.
    Infer {
        /// Raw radiograph (RPJ1) at detector size, or a preprocessed image.
        image: PathBuf,
    },
    /// Weight recovery along the breathing spline.
    EvalSpline,
    /// Deformation error on every phantom phase.
    EvalPhases,
    /// Inference throughput per batch size.
    Bench,
    /// Print the default configuration with every key.
    DefaultConfig,
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Phantom => Stage::Phantom,
        Command::Register => Stage::Register,
        Command::Subspace => Stage::Subspace,
        Command::Gendata => Stage::Gendata,
        Command::Train => Stage::Train,
        Command::Infer { .. } => Stage::Infer,
        Command::EvalSpline => Stage::EvalSpline,
        Command::EvalPhases => Stage::EvalPhases,
        Command::Bench => Stage::Bench,
        Command::DefaultConfig => return None,
    })
}

fn run(cli: Cli) -> lungtrack_core::Result<()> {
    let Some(stage) = stage_of(&cli.command) else {
        print!("{}", PipelineConfig::default_toml());
        return Ok(());
    };
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.dry_run {
        print!("{}", dry_run(stage, &cfg, &cli.out));
        return Ok(());
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let opts = RunOptions {
        image: match &cli.command {
            Command::Infer { image } => Some(image.clone()),
            _ => None,
        },
    };
    let summary = run_stage(stage, &cfg, &cli.out, &opts, &mut |line| eprintln!("{line}"))?;
    println!("{}", summary.trim_end());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
