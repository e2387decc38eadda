mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evimae::model::ModalitySet;

use crate::commands::{Init, Protocol};
use crate::config::{DeviceScale, Overrides};
use crate::error::Result;

#[derive(Parser, Debug)]
#[command(name = "evimae", version, about = "Masked autoencoding of wearable IMU and egocentric video")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Run configuration (JSON); flags below take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    modality: Option<ModalitySet>,
    #[arg(long, global = true, value_enum)]
    device_scale: Option<DeviceScale>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth { spec: PathBuf },
    /// Self-supervised pretraining on the pretrain split.
    Pretrain {
        /// Dataset root (overrides the config's "dataset").
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised finetuning on the train split, selecting on val.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// A pretraining checkpoint, or `scratch`.
        #[arg(long, default_value = "scratch")]
        init: Init,
        /// Comma-separated device ids removed at finetuning and evaluation.
        #[arg(long, value_delimiter = ',')]
        missing_devices: Option<Vec<String>>,
    },
    /// Evaluate a checkpoint under one of the protocols.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        protocol: Protocol,
        #[arg(long, value_delimiter = ',')]
        missing_devices: Option<Vec<String>>,
    },
    /// Markdown table comparing finished runs.
    Report { dirs: Vec<PathBuf> },
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let overrides = |data: Option<PathBuf>| Overrides {
        dataset: data,
        seed: g.seed,
        modality: g.modality,
        device_scale: g.device_scale,
    };
    let out = |name: &str| g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let config = g.config.as_deref();
    match cli.command {
        Command::Synth { spec } => {
            commands::synth(&spec, &out("synth"), g.seed)?;
        }
        Command::Pretrain { data, resume } => {
            commands::pretrain_cmd(config, &overrides(data), &out("pretrain"), resume.as_deref())?;
        }
        Command::Finetune { data, init, missing_devices } => {
            commands::finetune_cmd(config, &overrides(data), &out("finetune"), &init, missing_devices)?;
        }
        Command::Eval { data, checkpoint, protocol, missing_devices } => {
            commands::eval_cmd(config, &overrides(data), &out("eval"), &checkpoint, protocol, missing_devices)?;
        }
        Command::Report { dirs } => {
            let table = commands::report(&dirs);
            print!("{table}");
            if let Some(dir) = &g.out {
                std::fs::create_dir_all(dir).map_err(|e| error::CliError::io(dir, e))?;
                let path = dir.join("report.md");
                std::fs::write(&path, &table).map_err(|e| error::CliError::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
