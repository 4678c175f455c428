//! The `forge` command line.
//!
//! Exit codes: 0 success, 2 configuration or domain error, 3 numeric or
//! state failure, 4 I/O or container failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub use commands::{
    analyze_checkpoint, cmd_analyze, cmd_evaluate, cmd_generate, list_checkpoints, poisoned_file, read_noise,
    AnalyzeOutput, DerivedSeeds, EvaluateSummary, LedgerRow, Manifest, CHECKPOINT_DIR, LEDGER_FILE, MANIFEST_FILE,
    NOISE_FILE, SURROGATE_FILE, TEST_FILE, TRAIN_FILE,
};
pub use config::{
    apply_override, env_overrides, AnalyzeSection, AttackerSection, DatasetSection, EarlyStopSection, FilterChoice,
    GeneratorSection, PgmSource, RunConfig, SeedSection, SurrogateSection, ENV_PREFIX,
};

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Generate and evaluate unlearnable examples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides `seeds.root`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the generator and write noise and poisoned data.
    Generate(CommonArgs),
    /// Train attacker models over the configured grid.
    Evaluate(CommonArgs),
    /// Robustness and correlation over surrogate checkpoints.
    Analyze(CommonArgs),
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Precondition(_) | Error::Domain(_) => 2,
        Error::Numeric { .. } | Error::State(_) | Error::Dimension { .. } => 3,
        Error::Io { .. } | Error::Container(_) => 4,
    }
}

fn load(args: &CommonArgs) -> crate::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds.root = s;
    }
    Ok(cfg)
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(a) => load(a).and_then(|c| cmd_generate(&c)).map(|m| {
            println!("generated {} noise in {:.1}s", m.method.as_str(), m.wall_time_seconds);
        }),
        Command::Evaluate(a) => load(a).and_then(|c| cmd_evaluate(&c, a.jobs)).map(|s| {
            for r in &s.rows {
                println!(
                    "{} fraction={} rho_a={:.5} filter={} seed={} acc={:.4}",
                    r.method, r.fraction, r.rho_a, r.filter, r.seed, r.acc
                );
            }
        }),
        Command::Analyze(a) => load(a).and_then(|c| cmd_analyze(&c, a.jobs)).map(|o| {
            println!(
                "{} checkpoints; pearson(R_theta, F) = {:.4}, pearson(R_delta, F) = {:.4}",
                o.samples.len(),
                o.correlation.theta.pearson,
                o.correlation.delta.pearson
            );
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("forge: {e}");
            exit_code(&e)
        }
    }
}
