//! `privada`: runs the private domain adaptation pipeline stage by stage.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "privada", version = env!("PRIVADA_VERSION"), about = "Private source-free domain adaptation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; built-in defaults apply without it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key by dotted path, e.g. `adapt.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; replaces `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed; replaces `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes `source.csv` and `target.csv` for the configured domain pair.
    GenData,
    /// Trains the source model: `source_model.json`, `train_log.csv`,
    /// `privacy_ledger.csv`.
    Pretrain {
        /// Labeled source data [default: <out>/source.csv].
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Fits the feature mixtures and writes the share package `share.json`.
    Share {
        /// Source model file [default: <out>/source_model.json].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Source data the model was trained on [default: <out>/source.csv].
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Adapts a target encoder: `target_encoder.json`, `adapt_log.csv`.
    Adapt {
        /// Share package [default: <out>/share.json].
        #[arg(long)]
        package: Option<PathBuf>,
        /// Target data; labels are ignored [default: <out>/target.csv].
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Scores an encoder with the package classifier: `metrics.csv`.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Membership-inference attacks: `attack.csv`.
    Attack {
        /// Package to attack; repeatable. Replaces `attack.packages`.
        #[arg(long = "package")]
        packages: Vec<PathBuf>,
        /// Training rows of the attacked model.
        #[arg(long)]
        members: Option<PathBuf>,
        /// Rows from the same population that were not trained on.
        #[arg(long)]
        nonmembers: Option<PathBuf>,
        /// Disjoint population sample for the mixture-shift attack.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Prints the privacy report for a (q, sigma, steps, delta) setting.
    Accountant {
        /// Sampling rate.
        #[arg(long)]
        q: Option<f64>,
        /// Noise multiplier.
        #[arg(long)]
        sigma: Option<f64>,
        /// Number of noisy releases.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        delta: Option<f64>,
        /// RDP order; repeatable. Replaces `accountant.orders`.
        #[arg(long = "order")]
        orders: Vec<f64>,
        #[arg(long)]
        target_epsilon: Option<f64>,
    },
    /// Writes encoder features per row, optionally projected: `embeddings.csv`.
    Embeddings {
        #[command(flatten)]
        model: ModelArgs,
    },
}

/// Which encoder is applied to which data.
#[derive(Debug, Args)]
struct ModelArgs {
    /// Share package [default: <out>/share.json].
    #[arg(long)]
    package: Option<PathBuf>,
    /// Adapted target encoder [default: <out>/target_encoder.json].
    #[arg(long, conflicts_with = "source_encoder")]
    encoder: Option<PathBuf>,
    /// Uses the package encoder unchanged (the no-adapt baseline).
    #[arg(long)]
    source_encoder: bool,
    /// Labeled data [default: <out>/target.csv].
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("privada: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    for s in &cli.global.sets {
        overrides.push(config::parse_override(s)?);
    }
    let path_value = |p: &PathBuf| toml::Value::String(p.display().to_string());
    if let Some(seed) = cli.global.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::config("seed must fit in a signed 64-bit integer"))?;
        overrides.push(("seed".into(), toml::Value::Integer(seed)));
    }
    if let Some(out) = &cli.global.out {
        overrides.push(("output_dir".into(), path_value(out)));
    }
    match &cli.command {
        Command::Attack { packages, members, nonmembers, reference } => {
            if !packages.is_empty() {
                overrides
                    .push(("attack.packages".into(), toml::Value::Array(packages.iter().map(path_value).collect())));
            }
            for (key, p) in [("members", members), ("nonmembers", nonmembers), ("reference", reference)] {
                if let Some(p) = p {
                    overrides.push((format!("attack.{key}"), path_value(p)));
                }
            }
        }
        Command::Accountant { q, sigma, steps, delta, orders, target_epsilon } => {
            for (key, v) in [("q", q), ("sigma", sigma), ("delta", delta), ("target_epsilon", target_epsilon)] {
                if let Some(v) = v {
                    overrides.push((format!("accountant.{key}"), toml::Value::Float(*v)));
                }
            }
            if let Some(s) = steps {
                let s = i64::try_from(*s).map_err(|_| CliError::config("steps too large"))?;
                overrides.push(("accountant.steps".into(), toml::Value::Integer(s)));
            }
            if !orders.is_empty() {
                overrides.push((
                    "accountant.orders".into(),
                    toml::Value::Array(orders.iter().map(|&o| toml::Value::Float(o)).collect()),
                ));
            }
        }
        _ => {}
    }
    let config = RunConfig::load(cli.global.config.as_deref(), &overrides)?;
    let run = commands::Run::start(config, cli.command.name())?;
    match cli.command {
        Command::GenData => run.gen_data(),
        Command::Pretrain { source } => run.pretrain(source),
        Command::Share { model, source } => run.share(model, source),
        Command::Adapt { package, target } => run.adapt(package, target),
        Command::Evaluate { model } => run.evaluate(model.into()),
        Command::Attack { .. } => run.attack(),
        Command::Accountant { .. } => run.accountant(),
        Command::Embeddings { model } => run.embeddings(model.into()),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Share { .. } => "share",
            Command::Adapt { .. } => "adapt",
            Command::Evaluate { .. } => "evaluate",
            Command::Attack { .. } => "attack",
            Command::Accountant { .. } => "accountant",
            Command::Embeddings { .. } => "embeddings",
        }
    }
}

impl From<ModelArgs> for commands::ModelChoice {
    fn from(a: ModelArgs) -> Self {
        Self { package: a.package, encoder: a.encoder, source_encoder: a.source_encoder, data: a.data }
    }
}
