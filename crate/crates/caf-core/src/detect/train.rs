//! Plain-SGD training loop with per-step loss history, periodic validation,
//! and early stopping on validation loss.

use crate::autodiff::Tape;
use crate::error::{CoreError, Result};
use crate::metrics::{evaluate, DetBox, EvalReport};
use crate::tensor::{concat_n, Tensor4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decode::{decode_predictions, DecodeConfig};
use super::loss::{detection_loss_t, encode_targets};
use super::model::{detector_forward_t, ToyDetectorParams};
use super::scene::{gen_scene, SceneConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// SGD step size; 0 runs the loop without touching parameters.
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Seed for batch sampling; scene content is governed by the scene seed.
    pub seed: u64,
    /// Steps between validation passes; 0 disables validation.
    pub val_every: usize,
    /// Stop after this many validation passes without a loss improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    /// Images drawn from the scene for training (scene indices `0..n`).
    pub train_images: usize,
    /// Held-out images (scene indices continuing after the training ones).
    pub val_images: usize,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            val_every: 50,
            patience: 10,
            train_images: 64,
            val_images: 16,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CoreError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be >= 1".into()));
        }
        self.decode.validate()
    }
}

/// In-memory image/ground-truth pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor4<f32>>,
    pub gts: Vec<Vec<DetBox>>,
}

impl Dataset {
    /// Render `count` scenes starting at `first_index`. Scenes are
    /// independent by index, so they render in parallel.
    pub fn from_scene(cfg: &SceneConfig, count: usize, first_index: u64) -> Result<Self> {
        cfg.validate()?;
        let mut images = Vec::with_capacity(count);
        let mut gts = Vec::with_capacity(count);
        let rendered = crate::par::indexed_map(count, |i| gen_scene(cfg, first_index + i as u64));
        for r in rendered {
            let (img, g) = r?;
            images.push(img);
            gts.push(g);
        }
        Ok(Dataset { images, gts })
    }

    pub fn push(&mut self, image: Tensor4<f32>, gt: Vec<DetBox>) {
        self.images.push(image);
        self.gts.push(gt);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One validation pass: `step` is the number of SGD steps completed.
#[derive(Clone, Copy, Debug)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
    pub map50: f64,
}

pub struct TrainOutcome {
    pub params: ToyDetectorParams<f32>,
    pub loss_history: Vec<f64>,
    pub val_history: Vec<ValPoint>,
    pub stopped_early: bool,
}

fn sgd_step(t: &mut Tensor4<f32>, g: &Tensor4<f32>, lr: f32) {
    for (p, &gv) in t.data_mut().iter_mut().zip(g.data().iter()) {
        *p -= lr * gv;
    }
}

/// Mean loss and detection metrics of `params` over a dataset, running
/// forward in inference mode chunk by chunk.
pub fn evaluate_detector(
    params: &ToyDetectorParams<f32>,
    data: &Dataset,
    chunk: usize,
    decode: &DecodeConfig,
) -> Result<(f64, EvalReport)> {
    if data.is_empty() {
        return Err(CoreError::Config("cannot evaluate on an empty dataset".into()));
    }
    let cell = params.cell() as f64;
    let classes = params.classes();
    let chunk = chunk.max(1);
    let mut loss_sum = 0.0;
    let mut dets: Vec<Vec<DetBox>> = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let imgs: Vec<&Tensor4<f32>> = data.images[start..end].iter().collect();
        let batch = concat_n(&imgs)?;
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let nodes = params.stage(&mut tape, false);
        let preds = detector_forward_t(&mut tape, x, &nodes)?;
        let shape = tape.value(preds).shape();
        let targets = encode_targets(&data.gts[start..end], (shape.2, shape.3), cell, classes)?;
        let loss = detection_loss_t(&mut tape, preds, &targets)?;
        loss_sum += tape.value(loss).at(0, 0, 0, 0) as f64 * (end - start) as f64;
        dets.extend(decode_predictions(tape.value(preds), classes, cell, decode)?);
    }
    let report = evaluate(&dets, &data.gts, classes)?;
    Ok((loss_sum / data.len() as f64, report))
}

/// Train on explicit datasets. Deterministic given the config seed and the
/// initial parameters; validation runs every `val_every` steps when a
/// validation set is present.
pub fn train_on(
    mut params: ToyDetectorParams<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("training set is empty".into()));
    }
    let cell = params.cell() as f64;
    let classes = params.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let mut val_history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut evals_since_best = 0usize;
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let imgs: Vec<&Tensor4<f32>> = picks.iter().map(|&i| &data.images[i]).collect();
        let batch = concat_n(&imgs)?;
        let batch_gts: Vec<Vec<DetBox>> = picks.iter().map(|&i| data.gts[i].clone()).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let nodes = params.stage(&mut tape, true);
        let preds = detector_forward_t(&mut tape, x, &nodes)?;
        let shape = tape.value(preds).shape();
        let targets = encode_targets(&batch_gts, (shape.2, shape.3), cell, classes)?;
        let loss_id = detection_loss_t(&mut tape, preds, &targets)?;
        let loss = tape.value(loss_id).at(0, 0, 0, 0) as f64;
        // The 1e9 cutoff catches a runaway trajectory while everything is
        // still finite; one more step would overflow f32 mid-kernel.
        if !loss.is_finite() || loss > 1e9 {
            return Err(CoreError::NonFinite {
                op: "train",
                detail: format!(
                    "diverged: loss {loss} at step {step} (last recorded loss: {})",
                    loss_history
                        .last()
                        .map_or("none".to_string(), |l: &f64| l.to_string())
                ),
            });
        }

        let mut grads = tape.backward(loss_id)?;
        if cfg.lr != 0.0 {
            let lr = cfg.lr as f32;
            for (tensor, id) in params.tensors_mut().into_iter().zip(nodes.ordered()) {
                if let Some(g) = grads.take(id) {
                    sgd_step(tensor, &g, lr);
                }
            }
            if params.tensors().iter().any(|(_, t)| !t.is_finite()) {
                return Err(CoreError::NonFinite {
                    op: "train",
                    detail: format!("diverged: non-finite parameters after step {step} (loss {loss})"),
                });
            }
        }
        loss_history.push(loss);

        if let Some(vset) = val {
            if cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 {
                let (vloss, report) =
                    evaluate_detector(&params, vset, cfg.batch_size, &cfg.decode)?;
                val_history.push(ValPoint {
                    step: step + 1,
                    loss: vloss,
                    map50: report.map50,
                });
                if vloss + 1e-12 < best_val {
                    best_val = vloss;
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if cfg.patience > 0 && evals_since_best >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        params,
        loss_history,
        val_history,
        stopped_early,
    })
}

/// Train against a scene: `train_images` scenes feed the sampler and
/// `val_images` scenes directly after them are held out.
pub fn train(
    params: ToyDetectorParams<f32>,
    scene: &SceneConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.train_images == 0 {
        return Err(CoreError::Config("train_images must be >= 1".into()));
    }
    let data = Dataset::from_scene(scene, cfg.train_images, 0)?;
    let val = if cfg.val_images > 0 {
        Some(Dataset::from_scene(
            scene,
            cfg.val_images,
            cfg.train_images as u64,
        )?)
    } else {
        None
    };
    train_on(params, &data, val.as_ref(), cfg)
}
