//! Detection evaluation: IoU geometry, greedy NMS, greedy matching,
//! average precision by PR-curve area, and dataset-level reports.
//!
//! Scoring conventions, fixed so downstream comparisons are exact:
//! score ties break by input order everywhere; AP uses all-point
//! (continuous) interpolation; classes without ground truth are left out
//! of means; precision and recall degrade to 0 when their denominator is
//! empty.

use crate::error::{CoreError, Result};
use std::cmp::Ordering;

/// One detection or ground-truth box in pixel coordinates. Ground truth
/// carries score 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
}

impl DetBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Result<Self> {
        let b = DetBox {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::Config(format!("non-finite box {:?}", self)));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(CoreError::Config(format!(
                "box corners out of order: ({}, {}) to ({}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(CoreError::Config(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression over one class. Boxes are taken in
/// descending score (ties by lower input index); a box survives iff its IoU
/// with every already-kept box is at most `iou_thresh`. Kept boxes come back
/// in that greedy order.
pub fn nms(boxes: &[DetBox], iou_thresh: f64) -> Vec<DetBox> {
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let mut kept: Vec<DetBox> = Vec::new();
    for &i in &by_score_desc(&scores) {
        if kept.iter().all(|k| iou(&boxes[i], k) <= iou_thresh) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Greedy TP/FP labeling for one class in one image. Detections are
/// processed in descending score; each takes its best-IoU still-unmatched
/// ground truth and is a true positive iff that IoU reaches `iou_thresh`.
/// The returned labels align with the input detection order.
pub fn match_detections(dets: &[DetBox], gts: &[DetBox], iou_thresh: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut gt_used = vec![false; gts.len()];
    let mut labels = vec![false; dets.len()];
    for &i in &by_score_desc(&scores) {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let v = iou(&dets[i], gt);
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((v, gi)) = best {
            if v >= iou_thresh {
                gt_used[gi] = true;
                labels[i] = true;
            }
        }
    }
    labels
}

/// Area under the precision-recall curve with the monotone envelope
/// (all-point interpolation). `pairs` are (score, is-true-positive) in any
/// order. `None` when there is no ground truth to recall.
pub fn average_precision(pairs: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let order = by_score_desc(&scores);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for &i in &order {
        if pairs[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / gt_count as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    let mut env = 0.0f64;
    for p in points.iter_mut().rev() {
        env = env.max(p.1);
        p.1 = env;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// The ten-point IoU threshold grid named by "mAP@50-95".
pub fn iou_threshold_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Score cutoff at which the precision/recall columns are computed. The
/// operating point is an assumption; report headers must state it.
pub const PR_SCORE_THRESH: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// IoU thresholds the AP table is computed at.
    pub iou_thresholds: Vec<f64>,
    /// `per_class_ap[class][threshold index]`; `None` marks a class with no
    /// ground truth anywhere in the dataset.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    /// Ground-truth boxes per class across the dataset.
    pub gt_counts: Vec<usize>,
    pub map50: f64,
    pub map50_95: f64,
    /// Precision/recall and counts at score >= [`PR_SCORE_THRESH`], IoU 0.5.
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Dataset-level evaluation. `dets` and `gts` are per-image lists aligned by
/// index; every `class_id` must be below `num_classes`.
pub fn evaluate(dets: &[Vec<DetBox>], gts: &[Vec<DetBox>], num_classes: usize) -> Result<EvalReport> {
    if num_classes == 0 {
        return Err(CoreError::Config("evaluation needs at least one class".into()));
    }
    if dets.len() != gts.len() {
        return Err(CoreError::Config(format!(
            "{} detection images vs {} ground-truth images",
            dets.len(),
            gts.len()
        )));
    }
    for b in dets.iter().flatten().chain(gts.iter().flatten()) {
        b.validate()?;
        if b.class_id >= num_classes {
            return Err(CoreError::Config(format!(
                "class id {} outside 0..{num_classes}",
                b.class_id
            )));
        }
    }

    let thresholds = iou_threshold_grid();
    let mut gt_counts = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        gt_counts[g.class_id] += 1;
    }

    let class_boxes = |per_image: &[Vec<DetBox>], class: usize| -> Vec<Vec<DetBox>> {
        per_image
            .iter()
            .map(|img| img.iter().filter(|b| b.class_id == class).copied().collect())
            .collect()
    };

    let mut per_class_ap = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let class_dets = class_boxes(dets, class);
        let class_gts = class_boxes(gts, class);
        let mut row = Vec::with_capacity(thresholds.len());
        for &t in &thresholds {
            let mut pairs = Vec::new();
            for (d_img, g_img) in class_dets.iter().zip(class_gts.iter()) {
                let labels = match_detections(d_img, g_img, t);
                pairs.extend(d_img.iter().zip(labels).map(|(d, l)| (d.score, l)));
            }
            row.push(average_precision(&pairs, gt_counts[class]));
        }
        per_class_ap.push(row);
    }

    let scored: Vec<usize> = (0..num_classes).filter(|&c| gt_counts[c] > 0).collect();
    let class_mean = |f: &dyn Fn(usize) -> f64| -> f64 {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|&c| f(c)).sum::<f64>() / scored.len() as f64
        }
    };
    let map50 = class_mean(&|c| per_class_ap[c][0].expect("scored classes have ground truth"));
    let map50_95 = class_mean(&|c| {
        per_class_ap[c]
            .iter()
            .map(|ap| ap.expect("scored classes have ground truth"))
            .sum::<f64>()
            / thresholds.len() as f64
    });

    let mut tp = 0usize;
    let mut fp = 0usize;
    for class in 0..num_classes {
        for (d_img, g_img) in class_boxes(dets, class).iter().zip(class_boxes(gts, class).iter()) {
            let confident: Vec<DetBox> = d_img
                .iter()
                .filter(|d| d.score >= PR_SCORE_THRESH)
                .copied()
                .collect();
            for label in match_detections(&confident, g_img, 0.5) {
                if label {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    let total_gt: usize = gt_counts.iter().sum();
    let fneg = total_gt - tp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };

    Ok(EvalReport {
        iou_thresholds: thresholds,
        per_class_ap,
        gt_counts,
        map50,
        map50_95,
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}
