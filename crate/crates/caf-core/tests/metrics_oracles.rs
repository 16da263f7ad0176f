//! Metrics checked against independently coded references: integer-grid
//! IoU enumeration, a quadratic NMS, a prefix-recomputing evaluator, and
//! rank-only AP properties.

mod common;

use caf_core::metrics::{average_precision, evaluate, iou, match_detections, nms, DetBox};
use common::{
    assert_reports_agree, match_reference, nms_reference, rand_box, random_dataset, rng,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[test]
fn iou_one_seventh_matches_integer_grid_enumeration() {
    let a = DetBox::new(0.0, 0.0, 2.0, 2.0, 0, 1.0).unwrap();
    let b = DetBox::new(1.0, 1.0, 3.0, 3.0, 0, 1.0).unwrap();

    // count unit cells [i, i+1) x [j, j+1) inside each region
    let inside = |bx: &DetBox, i: i64, j: i64| {
        i as f64 >= bx.x1 && (i + 1) as f64 <= bx.x2 && j as f64 >= bx.y1 && (j + 1) as f64 <= bx.y2
    };
    let mut inter = 0;
    let mut union = 0;
    for i in -2..6 {
        for j in -2..6 {
            let (ia, ib) = (inside(&a, i, j), inside(&b, i, j));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    assert_eq!((inter, union), (1, 7));
    let got = iou(&a, &b);
    assert!((got - inter as f64 / union as f64).abs() < 1e-12, "iou = {got}");
}

#[test]
fn nms_matches_quadratic_reference_on_1000_instances() {
    let mut r = rng(101);
    for case in 0..1000 {
        let n = r.gen_range(0..30);
        let boxes: Vec<DetBox> = (0..n).map(|_| rand_box(&mut r, 0)).collect();
        let thresh = r.gen_range(0.1..0.9);
        let got = nms(&boxes, thresh);
        let want: Vec<DetBox> = nms_reference(&boxes, thresh)
            .into_iter()
            .map(|i| boxes[i])
            .collect();
        assert_eq!(got, want, "case {case} with {n} boxes at {thresh}");
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                assert!(iou(a, b) <= thresh, "kept boxes overlap past the threshold");
            }
        }
    }
}

#[test]
fn matching_agrees_with_selection_scan_reference() {
    let mut r = rng(202);
    for case in 0..400 {
        let dets: Vec<DetBox> = (0..r.gen_range(0..10)).map(|_| rand_box(&mut r, 0)).collect();
        let gts: Vec<DetBox> = (0..r.gen_range(0..10))
            .map(|_| DetBox { score: 1.0, ..rand_box(&mut r, 0) })
            .collect();
        let thresh = r.gen_range(0.2..0.8);
        assert_eq!(
            match_detections(&dets, &gts, thresh),
            match_reference(&dets, &gts, thresh),
            "case {case}"
        );
    }
}

#[test]
fn ap_depends_only_on_ranking() {
    let mut r = rng(303);
    for _ in 0..200 {
        let n = r.gen_range(1..20);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|i| (0.9 - i as f64 * 0.03, r.gen_bool(0.5)))
            .collect();
        let gt = r.gen_range(1..10);
        let base = average_precision(&pairs, gt);
        let squashed: Vec<(f64, bool)> = pairs
            .iter()
            .map(|&(s, l)| (1.0 / (1.0 + (-4.0 * s).exp()), l))
            .collect();
        assert_eq!(base, average_precision(&squashed, gt));
    }
}

#[test]
fn trailing_false_positive_never_raises_ap() {
    let mut r = rng(404);
    for _ in 0..200 {
        let n = r.gen_range(1..15);
        let mut pairs: Vec<(f64, bool)> = (0..n)
            .map(|i| (0.95 - i as f64 * 0.05, r.gen_bool(0.6)))
            .collect();
        let gt = r.gen_range(1..8);
        let before = average_precision(&pairs, gt).unwrap();
        pairs.push((0.001, false));
        let after = average_precision(&pairs, gt).unwrap();
        assert!(after <= before + 1e-12, "{after} > {before}");
    }
}

#[test]
fn tighter_iou_grids_never_beat_the_loose_one() {
    let mut r = rng(505);
    for _ in 0..60 {
        let (dets, gts) = random_dataset(&mut r, 4, 3);
        let rep = evaluate(&dets, &gts, 3).unwrap();
        assert!(
            rep.map50_95 <= rep.map50 + 1e-12,
            "{} > {}",
            rep.map50_95,
            rep.map50
        );
    }
}

#[test]
fn evaluate_matches_the_prefix_recomputing_reference_on_the_fixture() {
    // three images, two classes: exact hits, a shifted near-miss, a
    // duplicate, a confident false positive, and one missed gt
    let gts = vec![
        vec![
            DetBox::new(2.0, 2.0, 8.0, 8.0, 0, 1.0).unwrap(),
            DetBox::new(10.0, 1.0, 14.0, 6.0, 1, 1.0).unwrap(),
        ],
        vec![DetBox::new(3.0, 4.0, 9.0, 11.0, 0, 1.0).unwrap()],
        vec![
            DetBox::new(1.0, 1.0, 4.0, 4.0, 1, 1.0).unwrap(),
            DetBox::new(6.0, 6.0, 12.0, 12.0, 0, 1.0).unwrap(),
        ],
    ];
    let dets = vec![
        vec![
            DetBox::new(2.0, 2.0, 8.0, 8.0, 0, 0.95).unwrap(),
            DetBox::new(2.4, 2.4, 8.4, 8.4, 0, 0.55).unwrap(),
            DetBox::new(10.5, 1.5, 14.5, 6.5, 1, 0.80).unwrap(),
        ],
        vec![
            DetBox::new(4.0, 5.0, 10.0, 12.0, 0, 0.70).unwrap(),
            DetBox::new(12.0, 12.0, 15.0, 15.0, 1, 0.85).unwrap(),
        ],
        vec![DetBox::new(1.2, 1.1, 4.1, 4.2, 1, 0.60).unwrap()],
    ];
    let rep = evaluate(&dets, &gts, 2).unwrap();
    assert_reports_agree(&rep, &dets, &gts, 2);
    assert!(rep.map50 > 0.0 && rep.map50 < 1.0, "fixture should be imperfect");
}

#[test]
fn evaluate_matches_the_reference_on_random_datasets() {
    let mut r = rng(606);
    for _ in 0..25 {
        let (dets, gts) = random_dataset(&mut r, 3, 2);
        let rep = evaluate(&dets, &gts, 2).unwrap();
        assert_reports_agree(&rep, &dets, &gts, 2);
    }
}

#[test]
fn evaluate_ignores_image_and_detection_order() {
    let mut r = rng(707);
    // distinct scores so ranking is order-free
    let mut score = 0.99;
    let mut next_box = |class: usize, r: &mut ChaCha8Rng| {
        score -= 0.007;
        DetBox { score, ..rand_box(r, class) }
    };
    let dets: Vec<Vec<DetBox>> = (0..4)
        .map(|_| {
            (0..6)
                .map(|_| {
                    let class = r.gen_range(0..2);
                    next_box(class, &mut r)
                })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<DetBox>> = (0..4)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let class = r.gen_range(0..2);
                    DetBox { score: 1.0, ..rand_box(&mut r, class) }
                })
                .collect()
        })
        .collect();
    let base = evaluate(&dets, &gts, 2).unwrap();

    let mut dets2: Vec<Vec<DetBox>> = dets.iter().rev().cloned().collect();
    let gts2: Vec<Vec<DetBox>> = gts.iter().rev().cloned().collect();
    for img in &mut dets2 {
        img.reverse();
    }
    let shuffled = evaluate(&dets2, &gts2, 2).unwrap();

    assert_eq!(base.map50, shuffled.map50);
    assert_eq!(base.map50_95, shuffled.map50_95);
    assert_eq!(base.precision, shuffled.precision);
    assert_eq!(base.recall, shuffled.recall);
    assert_eq!(base.true_positives, shuffled.true_positives);
}
