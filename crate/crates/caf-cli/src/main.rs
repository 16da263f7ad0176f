//! `caf`: data generation, training, evaluation, gradient checking,
//! benchmarking, and single forward passes over one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation failure,
//! 3 numerical failure.

mod cmds;
mod fail;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use fail::Failure;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "caf", version, about = "CAF-style block detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Scene flags shared by `gen-data` and `train`. Defaults describe the
/// standard 64x64 three-class scene.
#[derive(Args, Clone)]
struct SceneFlags {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Disc radius range per class, e.g. "3-5,6-9,10-13".
    #[arg(long, default_value = "3-5,6-9,10-13")]
    radii: String,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 5)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
    /// Seed for scene rendering (images are indexed within it).
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset directory: images, ground truth, manifest.
    GenData {
        /// Output directory; must not already exist.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[command(flatten)]
        scene: SceneFlags,
    },
    /// Train the toy detector on freshly rendered scenes and write a
    /// checkpoint plus a per-step loss CSV.
    Train {
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV path (default: "<out>.loss.csv").
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Seed for init and batch sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stacked CAF-style blocks after the stem.
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        /// Ablation arm: drop the blocks entirely.
        #[arg(long, conflicts_with = "blocks")]
        no_caf_block: bool,
        /// First multi-scale branch dilation.
        #[arg(long, default_value_t = 2)]
        n1: usize,
        /// Second multi-scale branch dilation.
        #[arg(long, default_value_t = 3)]
        n2: usize,
        #[arg(long, default_value_t = 64)]
        train_images: usize,
        #[arg(long, default_value_t = 16)]
        val_images: usize,
        #[arg(long, default_value_t = 50)]
        val_every: usize,
        /// Validation evaluations without improvement before stopping early.
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
        #[command(flatten)]
        scene: SceneFlags,
    },
    /// Score detections against ground truth, or run a checkpoint over a
    /// generated dataset, and report detection metrics.
    Eval {
        /// Detection file (pairs with --gts).
        #[arg(long, requires = "gts", conflicts_with_all = ["checkpoint", "dataset"])]
        dets: Option<PathBuf>,
        /// Ground-truth file (pairs with --dets).
        #[arg(long)]
        gts: Option<PathBuf>,
        /// Checkpoint to run (pairs with --dataset).
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory from gen-data (pairs with --checkpoint).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Class count for file mode; default infers from the records.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient-check battery and print one row per op.
    Gradcheck {
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Seed for coordinate sampling.
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Max relative error allowed per row.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Time kernels over a shape sweep and emit CSV with analytic multiply
    /// counts for the two attention formulations.
    Bench {
        #[arg(long, default_value_t = 9)]
        reps: usize,
        /// Write the CSV here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over one tensor file.
    Forward {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { out, count, scene } => cmds::gen_data::run(&out, count, &scene),
        Cmd::Train {
            out,
            loss_csv,
            resume,
            steps,
            lr,
            batch,
            seed,
            blocks,
            no_caf_block,
            n1,
            n2,
            train_images,
            val_images,
            val_every,
            patience,
            conf,
            nms,
            scene,
        } => cmds::train::run(cmds::train::TrainArgs {
            out,
            loss_csv,
            resume,
            steps,
            lr,
            batch,
            seed,
            blocks: if no_caf_block { 0 } else { blocks },
            dilations: (n1, n2),
            train_images,
            val_images,
            val_every,
            patience,
            conf,
            nms,
            scene,
        }),
        Cmd::Eval {
            dets,
            gts,
            checkpoint,
            dataset,
            classes,
            conf,
            nms,
            out,
        } => cmds::eval::run(cmds::eval::EvalArgs {
            dets,
            gts,
            checkpoint,
            dataset,
            classes,
            conf,
            nms,
            out,
        }),
        Cmd::Gradcheck {
            samples,
            eps,
            seed,
            tol,
        } => cmds::gradcheck::run(samples, eps, seed, tol),
        Cmd::Bench { reps, out } => cmds::bench::run(reps, out.as_deref()),
        Cmd::Forward {
            checkpoint,
            input,
            out,
        } => cmds::forward::run(&checkpoint, &input, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
