mod config;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use forge_core::embed::RetrievalMode;

use config::{Overrides, PipelineConfig};
use stages::StageFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Ingest,
    Gcot,
    Tasks,
    Embed,
    Retrieve,
    Assemble,
    Verify,
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    TextOnly,
    Union,
}

/// Driving instruction-data pipeline, one stage per invocation.
#[derive(Debug, Parser)]
#[command(name = "forge", version)]
struct Args {
    #[arg(value_enum)]
    stage: Stage,
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Exemplars retrieved per triplet.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

fn run(args: &Args) -> Result<(), StageFailure> {
    let overrides = Overrides {
        seed: args.seed,
        k: args.k,
        mode: args.mode.map(|m| match m {
            Mode::TextOnly => RetrievalMode::TextOnly,
            Mode::Union => RetrievalMode::Union,
        }),
    };
    let cfg = PipelineConfig::load(&args.config, overrides).map_err(StageFailure::Config)?;

    let report = match args.stage {
        Stage::Ingest => stages::ingest(&cfg),
        Stage::Gcot => stages::gcot(&cfg),
        Stage::Tasks => stages::tasks(&cfg),
        Stage::Embed => stages::embed(&cfg),
        Stage::Retrieve => stages::retrieve(&cfg),
        Stage::Assemble => stages::assemble(&cfg),
        Stage::Verify => stages::verify_corpus(&cfg),
        Stage::Stats => stages::stats(&cfg),
    }?;

    let path = report.write(cfg.output_dir())?;
    let c = report.counts;
    log::info!(
        "{}: {} in, {} out, {} failed; report at {}",
        report.stage,
        c.inputs,
        c.outputs,
        c.failures,
        path.display()
    );
    let hard = report.hard_failures();
    if hard.is_empty() {
        return Ok(());
    }
    for f in &hard {
        eprintln!("{}: {}: {}", report.stage, f.id, f.error);
    }
    Err(StageFailure::Stage(anyhow::anyhow!(
        "{} failed for {} item(s); see {}",
        report.stage,
        hard.len(),
        path.display()
    )))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageFailure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(StageFailure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
