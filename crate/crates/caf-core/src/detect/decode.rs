//! Turn raw grid predictions into scored boxes.

use crate::error::{CoreError, Result};
use crate::metrics::{nms, DetBox};
use crate::tensor::{Scalar, Tensor4};

use super::model::BOX_FIELDS;

/// Thresholds applied when decoding predictions.
#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    /// Minimum objectness x class score for a cell to emit a box.
    pub conf_thresh: f64,
    /// IoU above which same-class boxes are suppressed.
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            conf_thresh: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf_thresh", self.conf_thresh), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(CoreError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode a batch of raw predictions into per-image boxes. Score is
/// sigmoid(objectness) times the winning class probability; cells at or
/// below `conf_thresh` stay silent, the rest go through per-class NMS.
pub fn decode_predictions<T: Scalar>(
    preds: &Tensor4<T>,
    classes: usize,
    cell: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<DetBox>>> {
    cfg.validate()?;
    let (n, ch, gh, gw) = preds.shape();
    if ch != BOX_FIELDS + classes || classes == 0 {
        return Err(CoreError::shape(
            "decode",
            format!("{ch} channels cannot split into 5 + {classes} classes"),
        ));
    }
    if !(cell.is_finite() && cell > 0.0) {
        return Err(CoreError::Config(format!("cell size {cell} must be positive")));
    }
    let (img_w, img_h) = (gw as f64 * cell, gh as f64 * cell);
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut raw = Vec::new();
        for row in 0..gh {
            for col in 0..gw {
                let at = |c: usize| preds.at(ni, c, row, col).to_f64();
                let obj = sigmoid(at(0));
                if obj <= cfg.conf_thresh {
                    continue;
                }
                let logits: Vec<f64> = (0..classes).map(|c| at(BOX_FIELDS + c)).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
                let (best, best_p) = logits
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (i, (l - mx).exp() / z))
                    .fold((0, f64::NEG_INFINITY), |acc, (i, p)| {
                        if p > acc.1 {
                            (i, p)
                        } else {
                            acc
                        }
                    });
                let score = obj * best_p;
                if score <= cfg.conf_thresh {
                    continue;
                }
                let cx = (col as f64 + 0.5 + at(1)) * cell;
                let cy = (row as f64 + 0.5 + at(2)) * cell;
                let bw = at(3).clamp(-10.0, 10.0).exp() * cell;
                let bh = at(4).clamp(-10.0, 10.0).exp() * cell;
                let x1 = (cx - bw / 2.0).clamp(0.0, img_w);
                let y1 = (cy - bh / 2.0).clamp(0.0, img_h);
                let x2 = (cx + bw / 2.0).clamp(0.0, img_w);
                let y2 = (cy + bh / 2.0).clamp(0.0, img_h);
                if x2 <= x1 || y2 <= y1 {
                    continue;
                }
                raw.push(DetBox::new(x1, y1, x2, y2, best, score)?);
            }
        }
        let mut kept = Vec::new();
        for class in 0..classes {
            let group: Vec<DetBox> = raw.iter().filter(|b| b.class_id == class).copied().collect();
            kept.extend(nms(&group, cfg.nms_iou));
        }
        out.push(kept);
    }
    Ok(out)
}
