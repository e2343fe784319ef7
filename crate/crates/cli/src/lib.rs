//! Command-line driver: renders datasets, annotates them, trains and scores detectors,
//! replays interaction sessions and merges evaluation reports.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cuelearn::annotation::Strategy;
use cuelearn::simworld::{ScenarioKind, SizeClass};

pub use config::{FlagOverrides, SessionConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cuelearn", version, about = "Teach a robot new objects from social cues, in simulation")]
pub struct Cli {
    /// Session configuration (TOML, or JSON by extension).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_strategy, value_name = "hand-proximal|distance-based")]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true, value_parser = parse_scenario, value_name = "constrained|from-afar|with-distractors")]
    pub scenario: Option<ScenarioKind>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the scenario's sequences into a dataset directory.
    Simulate,
    /// Annotate every sequence of a dataset with the configured strategy.
    Annotate {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Train a detector for one size split from a dataset and its annotations.
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        #[arg(long, value_parser = parse_split, value_name = "small|medium|big")]
        split: SizeClass,
    },
    /// Score a trained detector on a test dataset.
    Evaluate {
        /// Directory holding model.cdet and model.json.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        testset: PathBuf,
    },
    /// Replay a scripted interaction session end to end.
    RunPipeline,
    /// Merge evaluation reports (files, or directories searched for them).
    Report {
        #[arg(required = true, value_name = "RUN")]
        runs: Vec<PathBuf>,
    },
    /// Annotate, train and score every scenario, strategy and size split.
    Compare,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("expected hand-proximal or distance-based, got `{s}`"))
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    ScenarioKind::parse(s).ok_or_else(|| format!("expected constrained, from-afar or with-distractors, got `{s}`"))
}

fn parse_split(s: &str) -> Result<SizeClass, String> {
    SizeClass::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("expected small, medium or big, got `{s}`"))
}

/// Runs a parsed command line against the given environment; returns text for stdout.
pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> CliResult<String> {
    let flags = FlagOverrides { seed: cli.seed, strategy: cli.strategy, scenario: cli.scenario, out: cli.out.clone() };
    let cfg = SessionConfig::load(cli.config.as_deref(), env, &flags)?;
    let force = cli.force;
    let done = |dir: PathBuf| format!("wrote {}\n", dir.display());
    Ok(match &cli.command {
        Command::Simulate => done(commands::simulate(&cfg, force)?),
        Command::Annotate { dataset } => done(commands::annotate(&cfg, dataset, force)?),
        Command::Train { dataset, annotations, split } => done(commands::train(&cfg, dataset, annotations, *split, force)?),
        Command::Evaluate { model, testset } => done(commands::evaluate(&cfg, model, testset, force)?),
        Command::RunPipeline => done(commands::run_pipeline(&cfg, force)?),
        Command::Report { runs } => {
            let (dir, table) = commands::merge_reports(&cfg, runs, force)?;
            format!("{table}{}", done(dir))
        }
        Command::Compare => {
            let grid = commands::comparison_config(&cfg, cli.scenario, cli.strategy);
            let (dir, table) = commands::compare(&cfg, &grid, force)?;
            format!("{table}{}", done(dir))
        }
    })
}
