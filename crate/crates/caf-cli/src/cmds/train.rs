use super::scene_config;
use crate::fail::Failure;
use crate::SceneFlags;
use caf_core::detect::{train, DecodeConfig, ToyDetectorParams, TrainConfig, STEM_WIDTHS};
use caf_core::io::{atomic_write, Checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct TrainArgs {
    pub out: PathBuf,
    pub loss_csv: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub blocks: usize,
    pub dilations: (usize, usize),
    pub train_images: usize,
    pub val_images: usize,
    pub val_every: usize,
    pub patience: usize,
    pub conf: f64,
    pub nms: f64,
    pub scene: SceneFlags,
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let scene = scene_config(&args.scene)?;
    let decode = DecodeConfig {
        conf_thresh: args.conf,
        nms_iou: args.nms,
    };
    let cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        steps: args.steps,
        seed: args.seed,
        val_every: args.val_every,
        patience: args.patience,
        train_images: args.train_images,
        val_images: args.val_images,
        decode,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let params = match &args.resume {
        Some(path) => {
            let p = ToyDetectorParams::<f32>::from_checkpoint(&Checkpoint::read(path)?)?;
            if p.classes() != scene.classes() {
                return Err(Failure::data(format!(
                    "checkpoint has {} classes but the scene defines {}",
                    p.classes(),
                    scene.classes()
                )));
            }
            p
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            ToyDetectorParams::init_full(
                scene.classes(),
                args.blocks,
                &STEM_WIDTHS,
                args.dilations,
                &mut rng,
            )?
        }
    };

    let outcome = train(params, &scene, &cfg)?;

    let extra = [
        ("seed".to_string(), args.seed.to_string()),
        ("steps".to_string(), outcome.loss_history.len().to_string()),
        ("stopped_early".to_string(), outcome.stopped_early.to_string()),
    ];
    outcome.params.to_checkpoint(&extra)?.write(&args.out)?;

    let mut csv = String::from("step,loss\n");
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        writeln!(csv, "{i},{loss}").expect("writing to a String cannot fail");
    }
    let csv_path = args
        .loss_csv
        .unwrap_or_else(|| suffixed(&args.out, ".loss.csv"));
    atomic_write(&csv_path, csv.as_bytes())?;

    println!(
        "trained {} steps{}; checkpoint {}",
        outcome.loss_history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        args.out.display()
    );
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        println!("loss {first:.6} -> {last:.6}");
    }
    if let Some(v) = outcome.val_history.last() {
        println!("val step {}: loss {:.6}, map50 {:.4}", v.step, v.loss, v.map50);
    }
    Ok(())
}
