//! `fifa`: reproducible experiments for the landmark training lab.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fifa", about = "Landmark training lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face corpus (PPM images + JSON manifest).
    DatasetGen {
        /// Number of samples; must be at least 1.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory (one corpus per directory).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the two training views of one sample at a given epoch.
    AugmentPreview {
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        /// Patch schedule as "initial_side,epoch_interval".
        #[arg(long, default_value = "5,10")]
        schedule: String,
        /// Output directory for view1.ppm / view2.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and write the run log and checkpoints.
    Train {
        /// JSON training configuration; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// Output directory for runlog.csv, final.ckpt, best.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (fresh optimizer state).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus and write the metrics CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient-check suite and print one line per op.
    Gradcheck,
    /// Run the correlation-loss verification suite (oracle + gradients).
    DccaTest,
    /// Run the component ablation (standard augs / +patches / +Siamese)
    /// across seeds and print the trend table.
    Ablate {
        /// JSON training configuration shared by all runs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, e.g. "1,2,3".
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// Optional directory for per-run logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::DatasetGen { count, seed, size, out } => commands::dataset_gen(count, seed, size, &out),
        Command::AugmentPreview {
            data,
            index,
            epoch,
            schedule,
            out,
        } => commands::augment_preview(&data, index, epoch, &schedule, &out),
        Command::Train {
            config,
            train_data,
            test_data,
            out,
            resume,
        } => commands::train(config.as_deref(), &train_data, &test_data, &out, resume.as_deref()),
        Command::Eval { ckpt, data, config, out } => {
            commands::eval(&ckpt, &data, config.as_deref(), out.as_deref())
        }
        Command::Gradcheck => commands::gradcheck(),
        Command::DccaTest => commands::dcca_test(),
        Command::Ablate {
            config,
            seeds,
            train_data,
            test_data,
            out,
        } => commands::ablate(config.as_deref(), &seeds, &train_data, &test_data, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
