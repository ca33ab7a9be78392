//! `ctxrank`: simulate traffic, train scorers, evaluate, and serve re-ranking.
//!
//! Any `--section.key=value` flag overrides the matching key of the config
//! document, e.g. `--rerank.w=5` or `--world.seed=3`.

use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctxrank::config::{AppConfig, CONFIG_ENV};
use ctxrank::model::FeatureMode;
use ctxrank::pipeline::{self, PipelineError};
use ctxrank::service::Service;

#[derive(Parser, Debug)]
#[command(name = "ctxrank", version, about = "Contextual re-ranking pipeline and service")]
struct Cli {
    /// Config file (JSON). Defaults are used when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and day-partitioned session logs.
    Simulate,
    /// Train scorer models on the training days.
    Train {
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
    },
    /// Score held-out days and compare slate policies.
    Eval,
    /// Answer a file of re-ranking requests.
    RerankFile {
        #[arg(long)]
        input: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Contextual model; defaults to the trained one under paths.models.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Answer re-ranking requests from standard input, one JSON line each.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Contextual,
    Both,
}

/// Splits `--a.b=value` overrides from the arguments clap understands.
fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'));
        if is_override {
            overrides.push(a);
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, overrides: &[String]) -> Result<(), PipelineError> {
    let cfg = AppConfig::load(cli.config.as_deref(), overrides)?;
    let default_model = || pipeline::model_path(&cfg, FeatureMode::Contextual);
    match cli.command {
        Command::Simulate => {
            let s = pipeline::cmd_simulate(&cfg)?;
            println!(
                "seed={} users={} items={} train_impressions={} holdout_impressions={} logs={}",
                s.seed,
                s.users,
                s.items,
                s.train_impressions,
                s.holdout_impressions,
                s.log_dir.display()
            );
        }
        Command::Train { mode } => {
            let modes = match mode {
                ModeArg::Baseline => vec![FeatureMode::Baseline],
                ModeArg::Contextual => vec![FeatureMode::Contextual],
                ModeArg::Both => vec![FeatureMode::Baseline, FeatureMode::Contextual],
            };
            for m in modes {
                let s = pipeline::cmd_train(&cfg, m)?;
                println!(
                    "mode={} impressions={} steps={} input_dim={} model={} trajectory={}",
                    s.mode,
                    s.impressions,
                    s.steps,
                    s.input_dim,
                    s.model_path.display(),
                    s.trajectory_path.display()
                );
            }
        }
        Command::Eval => {
            let s = pipeline::cmd_eval(&cfg)?;
            println!(
                "ne_baseline={:.5} ne_contextual={:.5} improvement_pct={:.3} reports={}",
                s.ne.baseline.ne,
                s.ne.contextual.ne,
                s.ne.contextual.improvement_pct.unwrap_or(0.0),
                s.report_dir.display()
            );
            print!("{}", s.comparison.to_table());
        }
        Command::RerankFile { input, output, model } => {
            let model = model.unwrap_or_else(default_model);
            let stats = pipeline::cmd_rerank_file(&cfg, &model, &input, output.as_deref())?;
            eprintln!("requests={} errors={}", stats.requests, stats.errors);
        }
        Command::Serve { model } => {
            let model = model.unwrap_or_else(default_model);
            let mut service = Service::from_model_file(&model, &cfg)?;
            let stdin = io::stdin();
            let stats = service
                .run(BufReader::new(stdin.lock()), io::stdout().lock())
                .map_err(|source| PipelineError::Io {
                    path: "<stdio>".into(),
                    source,
                })?;
            eprintln!("requests={} errors={}", stats.requests, stats.errors);
        }
        Command::Config => println!("{}", cfg.to_json_pretty().trim_end()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
