//! Command-line front end for the semi-supervised centroid-constrained
//! classifier: centroid generation, training, evaluation, feature export,
//! and the ablation grid.
//!
//! Exit codes: 0 success, 1 bad arguments or malformed inputs, 2 success
//! with a convergence warning, 3 a run that started and then failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pedcc_ssl::data::Split;
use pedcc_ssl::pedcc::Method;

use commands::{CmdError, GenerateArgs};

const CONFIG_HELP: &str = "\
CONFIG FILE KEYS (flat `key = value`, `#` comments; defaults in parentheses):
  preset                 paper-cifar10 | paper-svhn; sets the loss weights only
  data.kind              blobs | cifar10 (blobs)
  data.classes           blob classes (4)
  data.dim               blob input dimension (8)
  data.per_class_train   blob training rows per class (504)
  data.per_class_test    blob test rows per class (250)
  data.separation        blob center separation (4)
  data.seed              blob sampling seed (77)
  data.labeled_per_class labeled rows kept per class (4)
  data.split_seed        label-split seed (13)
  data.dir               CIFAR-10 binary directory (cifar10 only)
  model.architecture     mlp | conv_small | wide_resnet (mlp)
  model.hidden           MLP hidden widths, comma separated (16)
  model.widen            conv_small width multiplier (1)
  model.depth            wide_resnet depth (10)
  model.width            wide_resnet width multiplier (1)
  model.feature_dim      feature dimension D (8)
  model.activation       activation function (relu)
  model.seed             weight-init seed (0)
  centroids.solver       repulsion | simplex (repulsion)
  centroids.seed         solver seed (11)
  centroids.file         load centroids from a file instead of solving
  loss.s                 cosine scale (7.5)
  loss.m                 additive margin (0.35)
  loss.n                 root exponent on the MSE term (1)
  loss.lambda1           MSE weight (1)
  loss.lambda2           margin-softmax weight (1)
  loss.lambda3           consistency weight (400)
  loss.lambda4           distribution-matching weight (0.2)
  loss.bandwidth         kernel bandwidth: median | a number (median)
  train.steps            optimizer steps (4000)
  train.lr               base learning rate, cosine-decayed (0.03)
  train.momentum         SGD momentum (0.9)
  train.labeled_batch    labeled rows per step (16)
  train.unlabeled_batch  unlabeled rows per step (64)
  train.ablation         ce_kl | pedcc_kl | pedcc_kl_mmd (pedcc_kl_mmd)
  train.seed             batch/augmentation seed (0)
  train.eval_every       evaluation period in steps (500)
  augment.policy         identity | vector_default | image_default (vector_default)
  augment.jitter         vector_default jitter magnitude (0.25)
  out.dir                output directory (runs/out)";

#[derive(Parser)]
#[command(
    name = "pedcc-ssl",
    version,
    about = "Semi-supervised classification onto predefined evenly-distributed class centroids"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}' (expected train or test)")),
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a centroid set and save it as text
    GenerateCentroids {
        /// Number of classes C
        #[arg(long)]
        classes: usize,
        /// Feature dimension D
        #[arg(long)]
        dim: usize,
        /// Initialization seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Construction: repulsion (any C ≤ 2D) or simplex (C ≤ D+1, exact)
        #[arg(long, default_value = "repulsion", value_parser = parse_method)]
        solver: Method,
        /// Repulsion iteration cap
        #[arg(long, default_value_t = 20000)]
        max_iters: usize,
        /// Repulsion step size
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        /// Repulsion convergence tolerance on the max tangential force
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration
    #[command(after_help = CONFIG_HELP)]
    Train {
        /// Run configuration file
        #[arg(long)]
        config: PathBuf,
        /// Override one key, e.g. --set train.lr=0.01 (repeatable, applied in order)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset
    #[command(after_help = CONFIG_HELP)]
    Eval {
        /// Checkpoint written by `train` (model.ckpt)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration file describing the dataset
        #[arg(long)]
        config: PathBuf,
        /// Override one config key (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Which split to evaluate
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Export normalized features and centroids as CSV (and optionally SVG)
    #[command(after_help = CONFIG_HELP)]
    ExportFeatures {
        /// Checkpoint written by `train` (model.ckpt)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration file describing the dataset
        #[arg(long)]
        config: PathBuf,
        /// Override one config key (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Which split to export
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Also draw a scatter plot (2-d feature spaces only)
        #[arg(long)]
        svg: bool,
        /// Output directory (defaults to the config's out.dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid: loss combinations plus a weight sweep
    #[command(after_help = CONFIG_HELP)]
    Ablation {
        /// Run configuration file (loss weights seed the sweep)
        #[arg(long)]
        config: PathBuf,
        /// Override one config key (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Seeds per cell, comma separated (at least 3)
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

/// Worker count for the ablation grid: PEDCC_SSL_THREADS when set,
/// otherwise the machine's parallelism.
fn thread_budget() -> Result<usize, CmdError> {
    match std::env::var("PEDCC_SSL_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CmdError::Usage(format!("PEDCC_SSL_THREADS must be a positive integer, got '{v}'"))
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn dispatch(cli: Cli) -> Result<u8, CmdError> {
    match cli.cmd {
        Cmd::GenerateCentroids {
            classes,
            dim,
            seed,
            solver,
            max_iters,
            step_size,
            tol,
            out,
        } => commands::generate_centroids(&GenerateArgs {
            classes,
            dim,
            seed,
            solver,
            max_iters,
            step_size,
            tol,
            out,
        }),
        Cmd::Train { config, sets } => commands::train_cmd(&config, &sets),
        Cmd::Eval {
            checkpoint,
            config,
            sets,
            split,
        } => commands::eval_cmd(&checkpoint, &config, &sets, split),
        Cmd::ExportFeatures {
            checkpoint,
            config,
            sets,
            split,
            svg,
            out,
        } => commands::export_features_cmd(&checkpoint, &config, &sets, split, svg, out.as_deref()),
        Cmd::Ablation {
            config,
            sets,
            seeds,
        } => commands::ablation_cmd(&config, &sets, &seeds, thread_budget()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // argument errors print to stderr and exit 1.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
