//! `fedbag`: train attention-MIL models over simulated federated sites and
//! evaluate them.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on runtime
//! failures. Progress goes to stderr; machine-readable outputs go to files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedbag_cli::config::{validate_config, ConfigError, Scenario};
use fedbag_cli::{export_attention, run_experiment};
use fedbag_core::data::synth::SynthSpec;
use fedbag_core::data::{generate_synthetic, save_dataset};
use fedbag_core::Task;

#[derive(Parser)]
#[command(name = "fedbag", version, about = "Federated attention-MIL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario sweep described by a config file.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's scenarios (repeatable).
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        /// Override the config's alpha sweep (repeatable).
        #[arg(long = "alpha")]
        alphas: Vec<f64>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the task (classification | survival).
        #[arg(long)]
        task: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-site dataset on disk.
    Synth {
        /// Synthetic dataset spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (bags/, manifest.csv, cuts.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-instance attention scores for every bag in a dataset.
    Attention {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    match s {
        "classification" => Ok(Task::Classification),
        "survival" => Ok(Task::Survival),
        other => Err(CliError::Config(format!(
            "unknown task {other:?} (expected classification | survival)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            scenarios,
            alphas,
            seed,
            task,
            out,
        } => {
            let mut config = validate_config(&config).map_err(|e| match e {
                ConfigError::Io { .. } | ConfigError::Parse { .. } | ConfigError::Invalid(_) => {
                    CliError::Config(e.to_string())
                }
            })?;
            if !scenarios.is_empty() {
                config.scenarios = scenarios
                    .iter()
                    .map(|s| s.parse::<Scenario>())
                    .collect::<Result<_, _>>()
                    .map_err(CliError::Config)?;
            }
            if !alphas.is_empty() {
                config.alphas = alphas;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(task) = task {
                config.task = parse_task(&task)?;
            }
            config
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;

            let report = run_experiment(&config, &out).map_err(|e| {
                CliError::Runtime(format!("{e:#}"))
            })?;
            log::info!(
                "wrote {} run(s) to {}",
                report.runs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| {
                CliError::Config(format!("parse error at line {}, column {}: {e}", e.line(), e.column()))
            })?;
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;

            let (bags, manifest) =
                generate_synthetic(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
            save_dataset(&bags, &manifest, &out)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            log::info!(
                "wrote {} bags and manifest to {}",
                bags.len(),
                out.display()
            );
            Ok(())
        }
        Command::Attention {
            checkpoint,
            manifest,
            out,
        } => {
            let bags = export_attention(&checkpoint, &manifest, &out)
                .map_err(|e| CliError::Runtime(format!("{e:#}")))?;
            log::info!("exported attention for {bags} bags to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!("configuration error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
