//! voxdet: phantom data generation, preprocessing, training and
//! evaluation as reproducible command-line runs.
//!
//! Every command resolves one JSON config (with dotted-path overrides),
//! writes the resolved document beside its outputs, and emits logs and
//! checkpoints that rerun byte-for-byte under the same config and seed.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "voxdet",
    version,
    about = "Desk-scale 3D trauma-detection pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a JSON run config; defaults apply when omitted.
    #[arg(long, short = 'c')]
    config: Option<String>,
    /// Dotted-path override, e.g. detect.schedule.total_epochs=8
    /// (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for this run.
    #[arg(long, env = "VOXDET_OUT_DIR")]
    out: Option<String>,
    /// Worker-thread cap recorded in the resolved config.
    #[arg(long, env = "VOXDET_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with ground truth.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the preprocessing pipeline over a dataset directory.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        input: String,
    },
    /// Masked-image-modeling pretraining of the U-Net.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preprocessed dataset directory.
        #[arg(long)]
        data: String,
    },
    /// Two-phase (semi-)supervised detection training.
    TrainDetect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: String,
        /// Pretrained encoder checkpoint to initialize from.
        #[arg(long)]
        encoder: Option<String>,
        /// Evaluate per-epoch mAP on this split (default: val).
        #[arg(long, default_value = "val")]
        val_split: String,
    },
    /// Frozen-encoder linear-probe classification training.
    TrainClassify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: String,
        #[arg(long)]
        encoder: String,
    },
    /// Evaluate a finished run's checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: String,
        /// Run directory produced by train-detect or train-classify.
        #[arg(long)]
        run: String,
        /// detect | classify
        #[arg(long)]
        task: String,
        /// labeled | val | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarize a run directory's metric log into plot-ready CSV.
    Report {
        /// Run directory containing a metrics CSV.
        #[arg(long)]
        run: String,
        /// Column to extract as (epoch, value) pairs.
        #[arg(long)]
        metric: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { cfg } => commands::cmd_phantom(&cfg),
        Command::Preprocess { cfg, input } => commands::cmd_preprocess(&cfg, &input),
        Command::Pretrain { cfg, data } => commands::cmd_pretrain(&cfg, &data),
        Command::TrainDetect {
            cfg,
            data,
            encoder,
            val_split,
        } => commands::cmd_train_detect(&cfg, &data, encoder.as_deref(), &val_split),
        Command::TrainClassify { cfg, data, encoder } => {
            commands::cmd_train_classify(&cfg, &data, &encoder)
        }
        Command::Eval {
            cfg,
            data,
            run,
            task,
            split,
        } => commands::cmd_eval(&cfg, &data, &run, &task, &split),
        Command::Report { run, metric } => commands::cmd_report(&run, metric.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

impl CliError {
    /// 2 = configuration error, 3 = data error, 4 = numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}
