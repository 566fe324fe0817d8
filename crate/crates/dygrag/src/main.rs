use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use dygrag::{run_matrix, Pipeline, PipelineConfig, Stage};

/// Retrieval-augmented link prediction on dynamic graphs.
#[derive(Debug, Parser)]
#[command(name = "dygrag", version)]
struct Cli {
    /// A stage (preprocess, pretrain, annotate, train-retriever, retrieve,
    /// finetune, evaluate), `all`, `matrix` or `show-config`.
    command: String,
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set fusion.k=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Suppress per-stage notices.
    #[arg(long, short)]
    quiet: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), std::env::vars(), &cli.sets)
        .context("loading configuration")?;
    match cli.command.as_str() {
        "show-config" => print!("{}", config.to_toml()),
        "all" => {
            let mut p = Pipeline::new(config)?;
            p.verbose = !cli.quiet;
            print!("{}", p.run_all()?);
        }
        "matrix" => print!("{}", run_matrix(&config, !cli.quiet)?),
        name => {
            let stage = Stage::parse(name).with_context(|| format!("unknown command `{name}`"))?;
            let seeds = config.run.seeds.clone();
            let p = Pipeline::new(config)?;
            for seed in seeds {
                println!("{}", p.run_stage(stage, seed)?.notice());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
