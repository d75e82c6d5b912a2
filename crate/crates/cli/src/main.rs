use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vitsig::pipeline::{run_stage, PipelineError, RunConfig, Stage};

/// Attack a toy Vision Transformer and measure clean-vs-attacked signature
/// separability.
#[derive(Debug, Parser)]
#[command(name = "vitsig", version)]
struct Cli {
    /// Stage to run: gen-data, train, build-reference, attack, extract,
    /// compare, report or all.
    stage: Option<String>,

    /// Same as the positional stage.
    #[arg(long = "stage", value_name = "NAME")]
    stage_flag: Option<String>,

    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides `seed` from the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Overrides `out` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let stage = match (&cli.stage, &cli.stage_flag) {
        (Some(a), Some(b)) if a != b => {
            return Err(PipelineError::Config(format!("conflicting stages {a:?} and {b:?}")))
        }
        (Some(s), _) | (None, Some(s)) => s.parse::<Stage>()?,
        (None, None) => Stage::All,
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    cfg.validate()?;
    run_stage(&cfg, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
