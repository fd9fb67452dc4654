//! `stagecast` batch pipeline: synthetic worlds, dataset compilation,
//! training, scoring and trace export.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stagecast::dataset::TimeRange;
use stagecast::DatasetVariant;

use config::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "stagecast", version, about = "Stream-stage forecasting pipeline")]
struct Cli {
    /// Worker threads for dataset building and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration with [world], [data], [model], [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world (graph, stage, precipitation files).
    Synth {
        #[arg(long, required = true)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a dataset file and a skip report from raw inputs.
    BuildDataset {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        stage: PathBuf,
        #[arg(long)]
        precip: PathBuf,
        #[arg(long)]
        variant: DatasetVariant,
        /// `START..END` (half-open); defaults to the span of the stage file.
        #[arg(long)]
        range: Option<TimeRange>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoint, report and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mean squared error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected architecture; the checkpoint must match it.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Which part of the configured split to score.
        #[arg(long, value_enum, default_value = "all")]
        subset: commands::Subset,
    },
    /// Print the 24 hourly forecasts for one dataset entry.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `SENSOR@TIME` or a zero-based entry index.
        #[arg(long)]
        entry: String,
    },
    /// Write a measured-vs-predicted CSV for one sensor.
    ExportPlot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sensor: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    let w = cli.workers;
    let result = match cli.cmd {
        Command::Synth { config, overrides, out } => commands::synth(&config, &overrides, &out),
        Command::BuildDataset {
            graph,
            stage,
            precip,
            variant,
            range,
            out,
        } => commands::build_dataset(&graph, &stage, &precip, variant, range, &out, w),
        Command::Train {
            dataset,
            model,
            config,
            out,
        } => commands::train(&dataset, model, config.config.as_deref(), &config.overrides, &out, w),
        Command::Eval {
            dataset,
            checkpoint,
            model,
            config,
            subset,
        } => commands::eval(
            &dataset,
            &checkpoint,
            model,
            config.config.as_deref(),
            &config.overrides,
            subset,
            w,
        ),
        Command::Predict {
            checkpoint,
            dataset,
            entry,
        } => commands::predict(&checkpoint, &dataset, &entry),
        Command::ExportPlot {
            checkpoint,
            dataset,
            sensor,
            out,
        } => commands::export_plot(&checkpoint, &dataset, &sensor, &out, w),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
