//! Grid target encoding and the detection loss.
//!
//! Each ground-truth box trains the cell containing its center. When two
//! boxes share a cell the larger one wins; on equal area the earlier one in
//! the input list is kept. Box targets are (dx, dy, log-w, log-h) relative
//! to the cell center and cell size.

use crate::autodiff::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::metrics::DetBox;
use crate::tensor::{Scalar, Tensor4};

use super::model::BOX_FIELDS;

pub const OBJ_WEIGHT: f64 = 1.0;
pub const BOX_WEIGHT: f64 = 5.0;
pub const CLS_WEIGHT: f64 = 1.0;

/// Dense training targets for one batch on a `(gh, gw)` grid.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// `(n, 1, gh, gw)`, 1 on cells owning a box.
    pub obj: Tensor4<T>,
    /// `(n, 4, gh, gw)`, offsets on positive cells, 0 elsewhere.
    pub boxes: Tensor4<T>,
    /// `(n, 4, gh, gw)`, 1 on all four channels of positive cells.
    pub box_mask: Tensor4<T>,
    /// `(n, K, gh, gw)`, one-hot class on positive cells.
    pub classes: Tensor4<T>,
    /// `(n, 1, gh, gw)`, same support as `obj`.
    pub class_mask: Tensor4<T>,
}

/// Encode per-image ground truth onto the prediction grid.
pub fn encode_targets<T: Scalar>(
    gts: &[Vec<DetBox>],
    grid: (usize, usize),
    cell: f64,
    classes: usize,
) -> Result<Targets<T>> {
    let (gh, gw) = grid;
    let n = gts.len();
    if n == 0 || gh == 0 || gw == 0 {
        return Err(CoreError::shape(
            "encode_targets",
            format!("empty batch or grid ({n} images, {gh}x{gw} cells)"),
        ));
    }
    if classes == 0 {
        return Err(CoreError::Config("encode_targets needs at least one class".into()));
    }
    let mut obj = Tensor4::zeros((n, 1, gh, gw));
    let mut boxes = Tensor4::zeros((n, 4, gh, gw));
    let mut box_mask = Tensor4::zeros((n, 4, gh, gw));
    let mut class_onehot = Tensor4::zeros((n, classes, gh, gw));
    let mut class_mask = Tensor4::zeros((n, 1, gh, gw));

    // area of the box currently owning each cell of the current image
    let mut owner_area = vec![f64::NEG_INFINITY; gh * gw];
    for (ni, img_gts) in gts.iter().enumerate() {
        owner_area.fill(f64::NEG_INFINITY);
        for g in img_gts {
            g.validate()?;
            if g.class_id >= classes {
                return Err(CoreError::Config(format!(
                    "gt class {} out of range for {classes} classes",
                    g.class_id
                )));
            }
            let (cx, cy) = ((g.x1 + g.x2) / 2.0, (g.y1 + g.y2) / 2.0);
            let col = ((cx / cell).floor() as isize).clamp(0, gw as isize - 1) as usize;
            let row = ((cy / cell).floor() as isize).clamp(0, gh as isize - 1) as usize;
            if g.area() <= owner_area[row * gw + col] {
                continue;
            }
            owner_area[row * gw + col] = g.area();

            *obj.at_mut(ni, 0, row, col) = T::one();
            *class_mask.at_mut(ni, 0, row, col) = T::one();
            for ch in 0..classes {
                *class_onehot.at_mut(ni, ch, row, col) =
                    if ch == g.class_id { T::one() } else { T::zero() };
            }
            let t = [
                cx / cell - (col as f64 + 0.5),
                cy / cell - (row as f64 + 0.5),
                ((g.x2 - g.x1).max(f64::MIN_POSITIVE) / cell).ln(),
                ((g.y2 - g.y1).max(f64::MIN_POSITIVE) / cell).ln(),
            ];
            for (ch, &v) in t.iter().enumerate() {
                *boxes.at_mut(ni, ch, row, col) = T::from_f64(v);
                *box_mask.at_mut(ni, ch, row, col) = T::one();
            }
        }
    }
    Ok(Targets {
        obj,
        boxes,
        box_mask,
        classes: class_onehot,
        class_mask,
    })
}

/// Composite loss on the tape: objectness BCE over every cell, plus L1 box
/// regression and class cross-entropy over positive cells, weighted
/// [`OBJ_WEIGHT`] / [`BOX_WEIGHT`] / [`CLS_WEIGHT`].
pub fn detection_loss_t<T: Scalar>(
    tape: &mut Tape<T>,
    preds: NodeId,
    targets: &Targets<T>,
) -> Result<NodeId> {
    let (_, ch, _, _) = tape.value(preds).shape();
    let classes = targets.classes.c();
    if ch != BOX_FIELDS + classes {
        return Err(CoreError::shape(
            "detection_loss",
            format!(
                "predictions carry {ch} channels, targets expect {}",
                BOX_FIELDS + classes
            ),
        ));
    }
    let obj_logits = tape.slice_channels(preds, 0, 1)?;
    let box_preds = tape.slice_channels(preds, 1, 4)?;
    let cls_logits = tape.slice_channels(preds, BOX_FIELDS, classes)?;

    let l_obj = tape.bce_with_logits_mean(obj_logits, targets.obj.clone())?;
    let l_box = tape.masked_l1_mean(box_preds, targets.boxes.clone(), targets.box_mask.clone())?;
    let l_cls = tape.masked_ce_mean(
        cls_logits,
        targets.classes.clone(),
        targets.class_mask.clone(),
    )?;

    let l_obj = tape.scale(l_obj, T::from_f64(OBJ_WEIGHT));
    let l_box = tape.scale(l_box, T::from_f64(BOX_WEIGHT));
    let l_cls = tape.scale(l_cls, T::from_f64(CLS_WEIGHT));
    let partial = tape.add(l_obj, l_box)?;
    tape.add(partial, l_cls)
}

/// Loss as a plain function over constant predictions.
pub fn detection_loss<T: Scalar>(
    preds: &Tensor4<T>,
    gts: &[Vec<DetBox>],
    cell: f64,
    classes: usize,
) -> Result<T> {
    let targets = encode_targets(gts, (preds.h(), preds.w()), cell, classes)?;
    let mut tape = Tape::new();
    let p = tape.leaf(preds.clone());
    let loss = detection_loss_t(&mut tape, p, &targets)?;
    Ok(tape.value(loss).at(0, 0, 0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class: usize) -> DetBox {
        DetBox::new(x1, y1, x2, y2, class, 1.0).unwrap()
    }

    #[test]
    fn center_cell_owns_the_box() {
        let gts = vec![vec![gt(10.0, 18.0, 22.0, 30.0, 1)]];
        // center (16, 24) -> col 2, row 3 on an 8px grid
        let t = encode_targets::<f64>(&gts, (8, 8), 8.0, 3).unwrap();
        assert_eq!(t.obj.at(0, 0, 3, 2), 1.0);
        assert_eq!(t.obj.data().iter().sum::<f64>(), 1.0);
        assert_eq!(t.classes.at(0, 1, 3, 2), 1.0);
        assert_eq!(t.boxes.at(0, 0, 3, 2), -0.5); // 16/8 - 2.5
        assert_eq!(t.boxes.at(0, 1, 3, 2), -0.5); // 24/8 - 3.5
        assert!((t.boxes.at(0, 2, 3, 2) - (12.0f64 / 8.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn cell_collision_keeps_the_larger_box() {
        let small = gt(12.0, 12.0, 16.0, 16.0, 0);
        let large = gt(8.0, 8.0, 20.0, 20.0, 2);
        for order in [vec![small, large], vec![large, small]] {
            let t = encode_targets::<f64>(&vec![order], (4, 4), 8.0, 3).unwrap();
            assert_eq!(t.obj.data().iter().sum::<f64>(), 1.0);
            assert_eq!(t.classes.at(0, 2, 1, 1), 1.0, "larger box must win");
        }
        // equal area: the earlier box wins
        let a = gt(8.0, 8.0, 16.0, 16.0, 0);
        let b = gt(9.0, 9.0, 17.0, 17.0, 1);
        let t = encode_targets::<f64>(&vec![vec![a, b]], (4, 4), 8.0, 3).unwrap();
        assert_eq!(t.classes.at(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn no_objects_and_cold_logits_give_near_zero_loss() {
        let mut preds = Tensor4::<f64>::zeros((1, 8, 4, 4));
        for h in 0..4 {
            for w in 0..4 {
                *preds.at_mut(0, 0, h, w) = -20.0;
            }
        }
        let loss = detection_loss(&preds, &[vec![]], 8.0, 3).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-6, "saturated negatives should be free: {loss}");
    }

    #[test]
    fn saturated_correct_predictions_on_one_object_cost_almost_nothing() {
        let b = gt(4.0, 4.0, 12.0, 12.0, 1);
        let gts = vec![vec![b]];
        let t = encode_targets::<f64>(&gts, (4, 4), 8.0, 3).unwrap();
        let mut preds = Tensor4::<f64>::zeros((1, 8, 4, 4));
        for h in 0..4 {
            for w in 0..4 {
                let pos = t.obj.at(0, 0, h, w) == 1.0;
                *preds.at_mut(0, 0, h, w) = if pos { 20.0 } else { -20.0 };
                if pos {
                    for ch in 0..4 {
                        *preds.at_mut(0, 1 + ch, h, w) = t.boxes.at(0, ch, h, w);
                    }
                    *preds.at_mut(0, 5, h, w) = -20.0;
                    *preds.at_mut(0, 6, h, w) = 20.0;
                    *preds.at_mut(0, 7, h, w) = -20.0;
                }
            }
        }
        let loss = detection_loss(&preds, &gts, 8.0, 3).unwrap();
        assert!(loss < 1e-3, "loss {loss} should be saturated away");
    }

    #[test]
    fn loss_is_nonnegative_for_arbitrary_predictions() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let preds = Tensor4::<f64>::from_fn((2, 8, 4, 4), |_, _, _, _| {
                rng.gen_range(-10.0..10.0)
            });
            let gts = vec![vec![gt(4.0, 4.0, 12.0, 12.0, 0)], vec![]];
            let loss = detection_loss(&preds, &gts, 8.0, 3).unwrap();
            assert!(loss >= 0.0 && loss.is_finite());
        }
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let gts = vec![vec![gt(0.0, 0.0, 8.0, 8.0, 3)]];
        assert!(encode_targets::<f64>(&gts, (4, 4), 8.0, 3).is_err());
    }
}
