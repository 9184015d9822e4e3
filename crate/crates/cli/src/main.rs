mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Supernet training and zero-cost subnet selection.
#[derive(Debug, Parser)]
#[command(name = "tofa", version)]
pub struct Cli {
    /// Allow commands to replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert CIFAR-10/100 binary batches into train.tds and test.tds.
    Convert {
        #[arg(long)]
        cifar_dir: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic blob-texture dataset.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 2400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds the class styles; datasets with different tasks have
        /// unrelated classes.
        #[arg(long, default_value_t = 0)]
        task: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fully supervised training on a source task, for initialization.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk-small")]
        profile: String,
        #[arg(long)]
        iters: Option<usize>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a supernet with the semi-supervised loss.
    Train {
        /// Fully labeled training set.
        #[arg(long, conflicts_with = "data")]
        labeled: Option<PathBuf>,
        /// Training set to split into labeled and unlabeled parts.
        #[arg(long, requires = "per_class")]
        data: Option<PathBuf>,
        /// Labeled samples per class taken from --data.
        #[arg(long)]
        per_class: Option<usize>,
        /// Use the samples of --data left after the split as unlabeled data.
        #[arg(long, requires = "data")]
        unlabeled_from_rest: bool,
        /// Separate unlabeled set (its labels are ignored).
        #[arg(long, conflicts_with = "unlabeled_from_rest")]
        unlabeled: Option<PathBuf>,
        /// Held-out set for periodic anchor evaluation.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Initial supernet checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Replace the classifier of --init even if the class count matches.
        #[arg(long, requires = "init")]
        reinit_head: bool,
        #[arg(long, default_value = "desk-small")]
        profile: String,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Pick one subnet per budget from a training run.
    Select {
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated budgets in the metric's units.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long, default_value = "last_sampled")]
        rule: String,
        #[arg(long, default_value = "flops")]
        metric: String,
        /// Keep the minnet and maxnet in the candidate pool.
        #[arg(long)]
        include_anchors: bool,
        /// Validation set; enables the random-candidate baseline.
        #[arg(long, requires = "candidates")]
        val: Option<PathBuf>,
        #[arg(long, requires = "val")]
        candidates: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-1 accuracy of a subnet.
    Eval {
        /// Supernet or standalone checkpoint.
        #[arg(long, conflicts_with = "run_dir", required_unless_present = "run_dir")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Config key; required for supernets.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// Batch-norm calibration images for a bare supernet checkpoint.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Cost of a config.
    Flops {
        #[arg(long, default_value = "desk-small")]
        profile: String,
        /// Config key, or `min` / `max`.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Materialize one standalone subnet per budget.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "last_sampled")]
        rule: String,
        #[arg(long, default_value = "flops")]
        metric: String,
        /// Labeled set whose accuracy is reported per rung.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
}

/// Training settings shared by `train` and `pretrain`. Precedence:
/// built-in default < `--config` file < `--set` < dedicated flags.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// Flat `key = value` file of training settings.
    #[arg(long = "config-file")]
    pub config_file: Option<PathBuf>,
    /// Override one setting, e.g. `--set tau=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
