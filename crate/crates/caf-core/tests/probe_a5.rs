//! Throwaway calibration probe. Not part of the suite; deleted before ship.

use caf_core::detect::{
    train_on, Dataset, DecodeConfig, SceneConfig, ToyDetectorParams, TrainConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn cfg(lr: f64, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 8,
        steps,
        seed,
        val_every: 100,
        patience: 0,
        train_images: 64,
        val_images: 16,
        decode: DecodeConfig {
            conf_thresh: 0.01,
            nms_iou: 0.5,
        },
    }
}

fn warm_run(scene: &SceneConfig, tag: &str, seed: u64, blocks: usize, main_steps: usize) {
    let data = Dataset::from_scene(scene, 64, 0).unwrap();
    let val = Dataset::from_scene(scene, 16, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ToyDetectorParams::<f32>::init(3, blocks, &mut rng).unwrap();
    let t0 = Instant::now();
    let warm = match train_on(params, &data, None, &cfg(0.003, 300, seed)) {
        Ok(o) => o,
        Err(e) => {
            println!("{tag} seed {seed} blocks {blocks}: DIVERGED in warmup: {e}");
            return;
        }
    };
    match train_on(warm.params, &data, Some(&val), &cfg(0.01, main_steps, seed ^ 0x5eed)) {
        Ok(out) => {
            let best = out
                .val_history
                .iter()
                .max_by(|a, b| a.map50.total_cmp(&b.map50))
                .unwrap();
            println!(
                "{tag} seed {seed} blocks {blocks}: best {:.4} @ {}, final {:.4}, {:.0} s",
                best.map50,
                300 + best.step,
                out.val_history.last().unwrap().map50,
                t0.elapsed().as_secs_f64(),
            );
        }
        Err(e) => println!("{tag} seed {seed} blocks {blocks}: DIVERGED in main: {e}"),
    }
}

#[test]
fn probe() {
    let noisy = SceneConfig {
        noise: 0.10,
        objects_range: (3, 6),
        ..SceneConfig::default()
    };
    let heavy = SceneConfig {
        noise: 0.16,
        blur: 1.5,
        ..SceneConfig::default()
    };
    let base = SceneConfig::default();
    for seed in [1u64, 2] {
        for blocks in [1usize, 0] {
            warm_run(&noisy, "noisy", seed, blocks, 1700);
        }
    }
    for seed in [1u64, 2] {
        for blocks in [1usize, 0] {
            warm_run(&heavy, "heavy", seed, blocks, 1700);
        }
    }
    for seed in [1u64, 2] {
        for blocks in [2usize, 0] {
            warm_run(&base, "twoblock", seed, blocks, 1700);
        }
    }
}
