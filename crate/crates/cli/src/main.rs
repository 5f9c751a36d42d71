mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, Profile};

#[derive(Parser, Debug)]
#[command(name = "dlo", version, about = "Rope flexibility estimation and flexibility-aware ring insertion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Validate the configuration and report the plan without writing.
    #[arg(long, global = true)]
    dry_run: bool,

    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate the flexibility dataset.
    GenFlexData,
    /// Train the flexibility estimators and write the shape-matching report.
    TrainFlex,
    /// Score a trained estimator on the held-out split.
    EvalFlex,
    /// Train insertion policies for every regime, f-setting and seed.
    TrainPolicy,
    /// Evaluate policies and baselines into the method and angle-band tables.
    EvalPolicy,
    /// Run the scripted straight-through insertion.
    OracleSmoke,
}

pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn validation(e: dlo_core::Error) -> Self {
        Failure::Validation(e.into())
    }

    /// Core errors keep their class: bad inputs are validation failures.
    pub fn runtime(e: dlo_core::Error) -> Self {
        match e {
            dlo_core::Error::Validation(_) => Failure::Validation(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(cli.profile, cli.config.as_deref(), cli.seed, cli.out.as_deref())
        .map_err(Failure::Validation)?;
    cfg.validate().map_err(Failure::Validation)?;
    match cli.command {
        Command::GenFlexData => commands::gen_flex_data(&cfg, cli.dry_run),
        Command::TrainFlex => commands::train_flex(&cfg, cli.dry_run),
        Command::EvalFlex => commands::eval_flex(&cfg, cli.dry_run),
        Command::TrainPolicy => commands::train_policy(&cfg, cli.dry_run),
        Command::EvalPolicy => commands::eval_policy(&cfg, cli.dry_run),
        Command::OracleSmoke => commands::oracle_smoke(&cfg, cli.dry_run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
