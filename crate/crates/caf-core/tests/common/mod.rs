//! Reference implementations the integration tests compare against.
//!
//! Everything here is written as the plainest possible nested loop straight
//! from the operation's definition, independent of the library kernels. Slow
//! is fine; these only run on test-sized inputs.

#![allow(dead_code)]

use caf_core::metrics::{iou, DetBox, EvalReport};
use caf_core::tensor::{Scalar, Tensor4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    lo: f64,
    hi: f64,
) -> Tensor4<T> {
    let numel = shape.0 * shape.1 * shape.2 * shape.3;
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor4::new(shape, data).unwrap()
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

pub fn assert_close<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, tol: f64, what: &str) {
    let d = max_abs_diff(a, b);
    assert!(d <= tol, "{what}: max abs diff {d} > {tol}");
}

/// Padded read: zero outside the spatial bounds.
fn read_pad<T: Scalar>(x: &Tensor4<T>, n: usize, c: usize, y: isize, xx: isize) -> T {
    if y < 0 || xx < 0 || y >= x.h() as isize || xx >= x.w() as isize {
        T::zero()
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

fn out_extent(input: usize, pad: usize, dilation: usize, kernel: usize, stride: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    assert!(input + 2 * pad >= span, "oracle: output collapses");
    (input + 2 * pad - span) / stride + 1
}

/// Grouped, strided, dilated, zero-padded cross-correlation, seven loops
/// deep. `w` is `(out_ch, in_ch/groups, kh, kw)`; `bias` has length out_ch.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    groups: usize,
) -> Tensor4<T> {
    let out_ch = w.n();
    let icg = w.c();
    assert_eq!(x.c(), icg * groups);
    assert_eq!(out_ch % groups, 0);
    let ocg = out_ch / groups;
    let h_out = out_extent(x.h(), padding.0, dilation.0, w.h(), stride.0);
    let w_out = out_extent(x.w(), padding.1, dilation.1, w.w(), stride.1);
    let mut out = Tensor4::zeros((x.n(), out_ch, h_out, w_out));
    for n in 0..x.n() {
        for oc in 0..out_ch {
            let g = oc / ocg;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for icl in 0..icg {
                        for ky in 0..w.h() {
                            for kx in 0..w.w() {
                                let iy = (oy * stride.0 + ky * dilation.0) as isize
                                    - padding.0 as isize;
                                let ix = (ox * stride.1 + kx * dilation.1) as isize
                                    - padding.1 as isize;
                                acc += read_pad(x, n, g * icg + icl, iy, ix)
                                    * w.at(oc, icl, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// 3x3x3 cross-correlation with the input viewed as `(n, c, 1, h, w)` and
/// zero padding 1 on every axis. `w5` is flat rank-5
/// `(out_ch, in_ch/groups, 3, 3, 3)` row-major.
pub fn naive_conv3d_singleton<T: Scalar>(
    x: &Tensor4<T>,
    w5: &[T],
    out_ch: usize,
    icg: usize,
    bias: Option<&[T]>,
    groups: usize,
) -> Tensor4<T> {
    assert_eq!(w5.len(), out_ch * icg * 27);
    assert_eq!(x.c(), icg * groups);
    let ocg = out_ch / groups;
    let w_at =
        |oc: usize, icl: usize, kd: usize, ky: usize, kx: usize| w5[(((oc * icg + icl) * 3 + kd) * 3 + ky) * 3 + kx];
    let mut out = Tensor4::zeros((x.n(), out_ch, x.h(), x.w()));
    for n in 0..x.n() {
        for oc in 0..out_ch {
            let g = oc / ocg;
            for oy in 0..x.h() {
                for ox in 0..x.w() {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for icl in 0..icg {
                        for kd in 0..3usize {
                            let id = kd as isize - 1;
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = (oy + ky) as isize - 1;
                                    let ix = (ox + kx) as isize - 1;
                                    // the depth axis has one slice at index 0
                                    let xv = if id != 0 {
                                        T::zero()
                                    } else {
                                        read_pad(x, n, g * icg + icl, iy, ix)
                                    };
                                    acc += xv * w_at(oc, icl, kd, ky, kx);
                                }
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Channel-axis layer norm at every `(n, h, w)` site.
pub fn naive_layer_norm<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Tensor4<T> {
    let c = x.c();
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let mut out = Tensor4::zeros(x.shape());
    for n in 0..x.n() {
        for h in 0..x.h() {
            for w in 0..x.w() {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.at(n, ci, h, w).to_f64();
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.at(n, ci, h, w).to_f64() - mean;
                    var += d * d;
                }
                var /= c as f64;
                let denom = (var + eps).sqrt();
                for ci in 0..c {
                    let xhat = (x.at(n, ci, h, w).to_f64() - mean) / denom;
                    *out.at_mut(n, ci, h, w) =
                        T::from_f64(xhat * gamma[ci].to_f64() + beta[ci].to_f64());
                }
            }
        }
    }
    out
}

/// Row softmax via the definition, in f64.
pub fn naive_softmax_lastdim<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut out = Tensor4::zeros(x.shape());
    for n in 0..x.n() {
        for c in 0..x.c() {
            for h in 0..x.h() {
                let mx = (0..x.w())
                    .map(|w| x.at(n, c, h, w).to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for w in 0..x.w() {
                    z += (x.at(n, c, h, w).to_f64() - mx).exp();
                }
                for w in 0..x.w() {
                    *out.at_mut(n, c, h, w) =
                        T::from_f64((x.at(n, c, h, w).to_f64() - mx).exp() / z);
                }
            }
        }
    }
    out
}

pub fn rand_box(r: &mut ChaCha8Rng, class_id: usize) -> DetBox {
    let x1 = r.gen_range(0.0..14.0);
    let y1 = r.gen_range(0.0..14.0);
    DetBox::new(
        x1,
        y1,
        x1 + r.gen_range(0.5..6.0),
        y1 + r.gen_range(0.5..6.0),
        class_id,
        r.gen_range(0.01..0.99),
    )
    .unwrap()
}

pub fn random_dataset(
    r: &mut ChaCha8Rng,
    images: usize,
    classes: usize,
) -> (Vec<Vec<DetBox>>, Vec<Vec<DetBox>>) {
    let dets = (0..images)
        .map(|_| {
            (0..r.gen_range(0..8))
                .map(|_| {
                    let class = r.gen_range(0..classes);
                    rand_box(r, class)
                })
                .collect()
        })
        .collect();
    let gts = (0..images)
        .map(|_| {
            (0..r.gen_range(0..6))
                .map(|_| {
                    let class = r.gen_range(0..classes);
                    DetBox { score: 1.0, ..rand_box(r, class) }
                })
                .collect()
        })
        .collect();
    (dets, gts)
}

/// Same greedy rule as the production NMS, separately coded: explicit
/// comparator, its own overlap arithmetic, index bookkeeping instead of box
/// cloning.
pub fn nms_reference(boxes: &[DetBox], thresh: f64) -> Vec<usize> {
    let overlap = |p: &DetBox, q: &DetBox| -> f64 {
        let w = (p.x2.min(q.x2) - p.x1.max(q.x1)).max(0.0);
        let h = (p.y2.min(q.y2) - p.y1.max(q.y1)).max(0.0);
        let inter = w * h;
        let area = |b: &DetBox| (b.x2 - b.x1) * (b.y2 - b.y1);
        let u = area(p) + area(q) - inter;
        if u <= 0.0 {
            0.0
        } else {
            inter / u
        }
    };
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| match boxes[j].score.partial_cmp(&boxes[i].score).unwrap() {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let mut suppressed = false;
        for &k in &kept {
            if overlap(&boxes[i], &boxes[k]) > thresh {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Greedy matching recoded: ranks via full selection scan, gt choice via a
/// fold over an iterator, separate overlap code.
pub fn match_reference(dets: &[DetBox], gts: &[DetBox], thresh: f64) -> Vec<bool> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![false; dets.len()];
    while !remaining.is_empty() {
        // highest score, earliest index
        let mut pick = 0;
        for pos in 1..remaining.len() {
            let (i, j) = (remaining[pick], remaining[pos]);
            if dets[j].score > dets[i].score {
                pick = pos;
            }
        }
        let i = remaining.remove(pick);
        let best = (0..gts.len())
            .filter(|&g| !taken[g])
            .map(|g| (g, iou(&dets[i], &gts[g])))
            .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= thresh {
                taken[g] = true;
                labels[i] = true;
            }
        }
    }
    labels
}

/// Evaluator recoded from scratch: global rank list per class, matching
/// recomputed for every prefix length, envelope by quadratic scan.
pub fn evaluate_reference(
    dets: &[Vec<DetBox>],
    gts: &[Vec<DetBox>],
    num_classes: usize,
) -> (Vec<Vec<Option<f64>>>, f64, f64, f64, f64, (usize, usize, usize)) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_class = vec![vec![None; thresholds.len()]; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        gt_count[g.class_id] += 1;
    }

    for class in 0..num_classes {
        if gt_count[class] == 0 {
            continue;
        }
        // flatten detections as (image, index), ranked like the production
        // path: score descending, earlier image / earlier index first
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (img, d_img) in dets.iter().enumerate() {
            for (i, d) in d_img.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((img, i));
                }
            }
        }
        ranked.sort_by(|&(ia, aa), &(ib, bb)| {
            dets[ib][bb]
                .score
                .partial_cmp(&dets[ia][aa].score)
                .unwrap()
                .then((ia, aa).cmp(&(ib, bb)))
        });

        for (ti, &t) in thresholds.iter().enumerate() {
            let mut points: Vec<(f64, f64)> = Vec::new();
            for prefix in 1..=ranked.len() {
                // rebuild the matching from nothing for this prefix
                let mut tp = 0usize;
                for img in 0..dets.len() {
                    let img_dets: Vec<DetBox> = ranked[..prefix]
                        .iter()
                        .filter(|&&(im, _)| im == img)
                        .map(|&(im, i)| dets[im][i])
                        .collect();
                    let img_gts: Vec<DetBox> = gts[img]
                        .iter()
                        .filter(|g| g.class_id == class)
                        .copied()
                        .collect();
                    tp += match_reference(&img_dets, &img_gts, t)
                        .iter()
                        .filter(|&&l| l)
                        .count();
                }
                points.push((
                    tp as f64 / gt_count[class] as f64,
                    tp as f64 / prefix as f64,
                ));
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for k in 0..points.len() {
                let (r, _) = points[k];
                let env = points[k..]
                    .iter()
                    .map(|&(_, p)| p)
                    .fold(0.0f64, f64::max);
                ap += (r - prev_r) * env;
                prev_r = r;
            }
            per_class[class][ti] = Some(ap);
        }
    }

    let scored: Vec<usize> = (0..num_classes).filter(|&c| gt_count[c] > 0).collect();
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let map50 = mean(scored.iter().map(|&c| per_class[c][0].unwrap()).collect());
    let map50_95 = mean(
        scored
            .iter()
            .map(|&c| per_class[c].iter().map(|a| a.unwrap()).sum::<f64>() / 10.0)
            .collect(),
    );

    let mut tp = 0;
    let mut fp = 0;
    for class in 0..num_classes {
        for img in 0..dets.len() {
            let strong: Vec<DetBox> = dets[img]
                .iter()
                .filter(|d| d.class_id == class && d.score >= 0.5)
                .copied()
                .collect();
            let img_gts: Vec<DetBox> = gts[img]
                .iter()
                .filter(|g| g.class_id == class)
                .copied()
                .collect();
            for l in match_reference(&strong, &img_gts, 0.5) {
                if l {
                    tp += 1
                } else {
                    fp += 1
                }
            }
        }
    }
    let total: usize = gt_count.iter().sum();
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
    (per_class, map50, map50_95, precision, recall, (tp, fp, total - tp))
}

pub fn assert_reports_agree(
    rep: &EvalReport,
    dets: &[Vec<DetBox>],
    gts: &[Vec<DetBox>],
    classes: usize,
) {
    let (per_class, map50, map50_95, precision, recall, counts) =
        evaluate_reference(dets, gts, classes);
    for c in 0..classes {
        for t in 0..10 {
            match (rep.per_class_ap[c][t], per_class[c][t]) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-9, "class {c} thresh {t}: {a} vs {b}")
                }
                other => panic!("class {c} thresh {t}: applicability mismatch {other:?}"),
            }
        }
    }
    assert!((rep.map50 - map50).abs() < 1e-9);
    assert!((rep.map50_95 - map50_95).abs() < 1e-9);
    assert!((rep.precision - precision).abs() < 1e-9);
    assert!((rep.recall - recall).abs() < 1e-9);
    assert_eq!(
        (rep.true_positives, rep.false_positives, rep.false_negatives),
        counts
    );
}
