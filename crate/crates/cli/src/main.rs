mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dastgcn_core::Error;
use toml::Value;

use crate::config::{key_help, merge, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "dastgcn", version, about = "Multi-aircraft 4D trajectory prediction with dual-attention graph networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of ADS-B CSV files into scene shards.
    #[command(after_help = key_help())]
    Prepare(Common),
    /// Generate synthetic scenario scenes.
    #[command(after_help = key_help())]
    Synth(Common),
    /// Train a model on prepared scenes.
    #[command(after_help = key_help())]
    Train(Common),
    /// Score a checkpoint with ADE and FDE.
    #[command(after_help = key_help())]
    Eval(Common),
    /// Dump forecasts and per-scene trajectories for plotting.
    #[command(after_help = key_help())]
    Predict(Common),
    /// Compare model gradients against finite differences on a toy scene.
    #[command(after_help = key_help())]
    Gradcheck(Common),
    /// Train and score every STGCN/TXP depth combination.
    #[command(after_help = key_help())]
    Layergrid(Common),
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML file of flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    sets: Vec<(String, String)>,
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl Common {
    fn resolve(&self) -> dastgcn_core::Result<RunConfig> {
        let text = self
            .config
            .as_ref()
            .map(|p| {
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))
            })
            .transpose()?;
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let mut flags = Vec::new();
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in i64".into()))?;
            flags.push(("seed".to_string(), Value::Integer(seed)));
        }
        for (key, value) in [
            ("paths.out_dir", &self.out_dir),
            ("paths.data_dir", &self.data_dir),
            ("paths.checkpoint", &self.checkpoint),
        ] {
            if let Some(v) = value {
                flags.push((key.to_string(), path(v)));
            }
        }
        merge(Overrides {
            file: text.as_deref(),
            flags: &flags,
            sets: &self.sets,
        })
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric_error() {
        3
    } else if err.is_data_error() || matches!(err, Error::Config(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let (common, run): (&Common, commands::Runner) = match &cli.command {
        Command::Prepare(c) => (c, commands::prepare),
        Command::Synth(c) => (c, commands::synth),
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Predict(c) => (c, commands::predict),
        Command::Gradcheck(c) => (c, commands::gradcheck),
        Command::Layergrid(c) => (c, commands::layergrid),
    };
    let outcome = common.resolve().and_then(|config| commands::execute(&config, run));
    match outcome {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Failed(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
