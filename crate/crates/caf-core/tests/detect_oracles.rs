//! End-to-end checks of the detector: target encoding inverted by decoding,
//! finite-difference verification through the whole model, and the
//! detector-to-metrics pipeline.

use caf_core::autodiff::gradcheck::{grad_check, GradCheckConfig};
use caf_core::autodiff::{NodeId, Tape};
use caf_core::blocks::{CafBlockHyper, CafBlockNodes, CAF_BLOCK_TENSORS};
use caf_core::detect::{
    decode_predictions, detection_loss_t, detector_forward_t, encode_targets, evaluate_detector,
    gen_scene, train_on, Dataset, DecodeConfig, DetectorNodes, SceneConfig, ToyDetectorParams,
    TrainConfig, BOX_FIELDS,
};
use caf_core::metrics::{iou, DetBox};
use caf_core::tensor::Tensor4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cell_of(b: &DetBox, cell: f64) -> (usize, usize) {
    let cx = (b.x1 + b.x2) / 2.0;
    let cy = (b.y1 + b.y2) / 2.0;
    ((cy / cell).floor() as usize, (cx / cell).floor() as usize)
}

/// Predictions that encode the targets with saturated logits.
fn saturated_preds(gts: &[Vec<DetBox>], grid: (usize, usize), cell: f64, classes: usize) -> Tensor4<f64> {
    let t = encode_targets::<f64>(gts, grid, cell, classes).unwrap();
    let (n, (gh, gw)) = (gts.len(), grid);
    let mut preds = Tensor4::zeros((n, BOX_FIELDS + classes, gh, gw));
    for ni in 0..n {
        for row in 0..gh {
            for col in 0..gw {
                let pos = t.obj.at(ni, 0, row, col) == 1.0;
                *preds.at_mut(ni, 0, row, col) = if pos { 20.0 } else { -20.0 };
                for ch in 0..4 {
                    *preds.at_mut(ni, 1 + ch, row, col) = t.boxes.at(ni, ch, row, col);
                }
                for k in 0..classes {
                    let hit = pos && t.classes.at(ni, k, row, col) == 1.0;
                    *preds.at_mut(ni, BOX_FIELDS + k, row, col) =
                        if hit { 20.0 } else { -20.0 };
                }
            }
        }
    }
    preds
}

#[test]
fn saturated_encoding_decodes_back_to_the_ground_truth() {
    let cfg = SceneConfig::default();
    let cell = 8.0;
    let grid = (cfg.height / 8, cfg.width / 8);
    let mut recovered_total = 0usize;
    let mut images_used = 0usize;
    for index in 0..30 {
        let (_, gts) = gen_scene(&cfg, index).unwrap();
        // cell collisions lose the smaller box by design, so only scenes
        // where every box owns a distinct cell exercise full recovery
        let mut cells: Vec<(usize, usize)> = gts.iter().map(|g| cell_of(g, cell)).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != gts.len() || gts.is_empty() {
            continue;
        }
        images_used += 1;
        let preds = saturated_preds(&[gts.clone()], grid, cell, cfg.classes());
        let dets =
            decode_predictions(&preds, cfg.classes(), cell, &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].len(), gts.len(), "one box per ground truth");
        for g in &gts {
            let best = dets[0]
                .iter()
                .filter(|d| d.class_id == g.class_id)
                .map(|d| iou(d, g))
                .fold(0.0f64, f64::max);
            assert!(best > 0.99, "gt {g:?} recovered at IoU {best}");
            recovered_total += 1;
        }
    }
    assert!(
        images_used >= 20,
        "only {images_used} collision-free scenes out of 30"
    );
    assert!(recovered_total >= 40, "too few boxes exercised: {recovered_total}");
}

fn nodes_from_ids(ids: &[NodeId], stem_len: usize, hypers: &[CafBlockHyper]) -> DetectorNodes {
    let mut stem = Vec::with_capacity(stem_len);
    let mut k = 0;
    for _ in 0..stem_len {
        stem.push((ids[k], ids[k + 1]));
        k += 2;
    }
    let blocks = hypers
        .iter()
        .map(|&h| {
            let nodes = CafBlockNodes::from_slice(&ids[k..k + CAF_BLOCK_TENSORS]);
            k += CAF_BLOCK_TENSORS;
            (nodes, h)
        })
        .collect();
    DetectorNodes {
        stem,
        blocks,
        head: (ids[k], ids[k + 1]),
    }
}

#[test]
fn loss_through_the_whole_model_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0);
    let params =
        ToyDetectorParams::<f64>::init_full(2, 1, &[2, 3, 4], (2, 3), &mut rng).unwrap();
    let hypers: Vec<CafBlockHyper> = params.blocks.iter().map(CafBlockHyper::of).collect();
    let stem_len = params.stem.len();
    let tensors: Vec<Tensor4<f64>> =
        params.tensors().into_iter().map(|(_, t)| t.clone()).collect();

    let img = Tensor4::from_fn((1, 3, 16, 16), |_, _, _, _| rng.gen_range(0.0..1.0));
    let gts = vec![vec![
        DetBox::new(2.0, 2.0, 8.0, 8.0, 0, 1.0).unwrap(),
        DetBox::new(9.0, 9.0, 15.0, 15.0, 1, 1.0).unwrap(),
    ]];
    let targets = encode_targets::<f64>(&gts, (2, 2), 8.0, 2).unwrap();

    // the L1 term is piecewise linear, so a kink sitting just inside the
    // probe step shows up as a small fwd/bwd disagreement; a tighter kink
    // threshold classifies those coordinates as non-smooth instead of
    // letting the partial crossing register as gradient error
    let cfg = GradCheckConfig {
        samples_per_param: 100,
        kink_threshold: 2e-3,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &tensors,
        |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let x = tape.leaf(img.clone());
            let nodes = nodes_from_ids(ids, stem_len, &hypers);
            let preds = detector_forward_t(tape, x, &nodes)?;
            detection_loss_t(tape, preds, &targets)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.checked > 500, "only {} coordinates compared", report.checked);
    assert!(
        report.skipped < report.checked / 10,
        "too many coordinates skipped as kinks: {} of {}",
        report.skipped,
        report.checked
    );
    assert!(
        report.max_rel_err < 1e-3,
        "max relative error {} (worst {:?})",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn trained_detector_feeds_the_evaluator_end_to_end() {
    let scene = SceneConfig {
        height: 32,
        width: 32,
        radius_ranges: vec![(4.0, 7.0)],
        objects_range: (1, 2),
        noise: 0.02,
        blur: 1.0,
        seed: 31,
    };
    let data = Dataset::from_scene(&scene, 6, 0).unwrap();
    let val = Dataset::from_scene(&scene, 4, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ToyDetectorParams::init(1, 0, &mut rng).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 4,
        val_every: 0,
        patience: 0,
        ..TrainConfig::default()
    };
    let out = train_on(params, &data, None, &cfg).unwrap();
    let (loss, report) = evaluate_detector(&out.params, &val, 4, &DecodeConfig::default()).unwrap();
    assert!(loss.is_finite());
    let total_gts: usize = val.gts.iter().map(Vec::len).sum();
    assert_eq!(report.gt_counts.iter().sum::<usize>(), total_gts);
    assert_eq!(
        report.true_positives + report.false_negatives,
        total_gts,
        "every gt is either matched or missed"
    );
    assert!((0.0..=1.0).contains(&report.map50));
}
