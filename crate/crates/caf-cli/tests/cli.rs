//! End-to-end runs of the `caf` binary: every subcommand, exit-code
//! contract, determinism, and agreement with the library evaluator.

use caf_core::io::{read_detections, read_tensor, write_detections, DetectionRecord};
use caf_core::metrics::{evaluate, DetBox};
use caf_core::tensor::Tensor4;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn caf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().expect("no signal");
    assert_eq!(
        got,
        want,
        "exit {got}, wanted {want}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

/// Every regular file under `dir`, relative path -> bytes.
fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.insert(rel.to_string_lossy().into_owned(), std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn key_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= line in:\n{text}"))
        .to_string()
}

const TINY_SCENE: &[&str] = &[
    "--height", "32", "--width", "32", "--radii", "6-9", "--min-objects", "1",
    "--max-objects", "1", "--noise", "0.01", "--blur", "0.5",
];

#[test]
fn gen_data_is_deterministic_and_self_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = caf(&["gen-data", "--out", dir.to_str().unwrap(), "--count", "10", "--scene-seed", "7"]);
        assert_code(&out, 0);
    }
    let ca = dir_contents(&a);
    assert_eq!(ca, dir_contents(&b), "same flags and seed must give identical bytes");
    assert!(ca.contains_key("manifest.txt") && ca.contains_key("gts.txt"));
    assert_eq!(ca.keys().filter(|k| k.starts_with("images/")).count(), 10);

    let gts = read_detections(&a.join("gts.txt")).expect("generated ground truth re-reads");
    assert!(!gts.is_empty());
    for r in &gts {
        assert!(r.score.is_none(), "ground truth carries no scores");
        let b = r.to_box();
        b.validate().expect("generated boxes hold their invariants");
        assert!(b.x2 <= 64.0 && b.y2 <= 64.0);
    }

    let again = caf(&["gen-data", "--out", a.to_str().unwrap(), "--count", "10"]);
    assert_code(&again, 2);
}

#[test]
fn gen_data_count_zero_writes_a_valid_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("empty");
    assert_code(&caf(&["gen-data", "--out", dir.to_str().unwrap(), "--count", "0"]), 0);
    let manifest = caf_core::io::DatasetManifest::read(&dir.join("manifest.txt")).unwrap();
    assert!(manifest.image_ids.is_empty());
    assert_eq!(manifest.classes, 3);
    assert!(read_detections(&dir.join("gts.txt")).unwrap().is_empty());
}

#[test]
fn train_zero_steps_snapshots_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.ck"), tmp.path().join("b.ck"));
    for ck in [&a, &b] {
        let mut args = vec!["train", "--out", ck.to_str().unwrap(), "--steps", "0", "--train-images", "1", "--val-images", "1"];
        args.extend_from_slice(TINY_SCENE);
        assert_code(&caf(&args), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let csv = std::fs::read_to_string(tmp.path().join("a.ck.loss.csv")).unwrap();
    assert_eq!(csv, "step,loss\n");
}

#[test]
fn train_repeats_identically_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = vec![
        "train", "--steps", "6", "--lr", "0.005", "--batch", "2", "--seed", "3",
        "--no-caf-block", "--train-images", "2", "--val-images", "1", "--val-every", "100",
    ];
    base.extend_from_slice(TINY_SCENE);

    let (a, b) = (tmp.path().join("a.ck"), tmp.path().join("b.ck"));
    for ck in [&a, &b] {
        let mut args = base.clone();
        args.extend_from_slice(&["--out", ck.to_str().unwrap()]);
        assert_code(&caf(&args), 0);
    }
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("a.ck.loss.csv")).unwrap(),
        std::fs::read_to_string(tmp.path().join("b.ck.loss.csv")).unwrap(),
        "same flags and seed must give the same loss history"
    );

    let resumed = tmp.path().join("resumed.ck");
    let mut args = base.clone();
    args.extend_from_slice(&["--out", resumed.to_str().unwrap(), "--resume", a.to_str().unwrap()]);
    assert_code(&caf(&args), 0);
    assert_ne!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&resumed).unwrap(),
        "resumed training must move the parameters"
    );
}

#[test]
fn train_on_a_trivial_scene_crushes_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("triv.ck");
    let mut args = vec![
        "train", "--out", ck.to_str().unwrap(), "--steps", "700", "--lr", "0.01",
        "--batch", "4", "--no-caf-block", "--train-images", "4", "--val-images", "1",
        "--val-every", "1000",
    ];
    args.extend_from_slice(TINY_SCENE);
    assert_code(&caf(&args), 0);

    let csv = std::fs::read_to_string(tmp.path().join("triv.ck.loss.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 700);
    let (first, last) = (losses[0], losses[699]);
    assert!(
        last < 0.1 * first,
        "loss {first} only reached {last} after 700 steps"
    );
}

fn fixture_records() -> (Vec<DetectionRecord>, Vec<DetectionRecord>) {
    let gt = |img: &str, class, x1, y1, x2, y2| DetectionRecord {
        image_id: img.into(),
        class_id: class,
        score: None,
        x1,
        y1,
        x2,
        y2,
    };
    let det = |img: &str, class, score, x1, y1, x2, y2| DetectionRecord {
        image_id: img.into(),
        class_id: class,
        score: Some(score),
        x1,
        y1,
        x2,
        y2,
    };
    let gts = vec![
        gt("a", 0, 2.0, 2.0, 10.0, 10.0),
        gt("a", 1, 20.0, 20.0, 30.0, 32.0),
        gt("b", 0, 5.0, 5.0, 9.0, 9.0),
        gt("b", 2, 1.0, 1.0, 4.0, 4.0),
    ];
    let dets = vec![
        det("a", 0, 0.9, 2.0, 2.0, 10.0, 10.0),
        det("a", 0, 0.3, 40.0, 40.0, 50.0, 50.0),
        det("a", 1, 0.8, 21.0, 20.0, 30.0, 32.0),
        det("b", 0, 0.7, 5.0, 5.5, 9.0, 9.0),
        det("b", 2, 0.6, 11.0, 11.0, 14.0, 14.0),
    ];
    (dets, gts)
}

#[test]
fn eval_file_mode_matches_the_library_evaluator() {
    let tmp = tempfile::tempdir().unwrap();
    let (dets, gts) = fixture_records();
    let det_path = tmp.path().join("dets.txt");
    let gt_path = tmp.path().join("gts.txt");
    write_detections(&det_path, &dets).unwrap();
    write_detections(&gt_path, &gts).unwrap();

    let out = caf(&["eval", "--dets", det_path.to_str().unwrap(), "--gts", gt_path.to_str().unwrap()]);
    assert_code(&out, 0);
    let text = stdout_text(&out);

    let (det_boxes, gt_boxes, _) = caf_core::io::records_to_eval_inputs(&dets, &gts);
    let want = evaluate(&det_boxes, &gt_boxes, 3).unwrap();
    for (key, expect) in [
        ("map50", want.map50),
        ("map50_95", want.map50_95),
        ("precision", want.precision),
        ("recall", want.recall),
    ] {
        let got: f64 = key_value(&text, key).parse().unwrap();
        assert!(
            (got - expect).abs() < 1e-9,
            "{key}: binary {got} vs library {expect}"
        );
    }
    assert_eq!(key_value(&text, "true_positives"), want.true_positives.to_string());
    assert!(text.lines().any(|l| l.starts_with('#') && l.contains("0.5")), "operating point must be stated");
}

#[test]
fn eval_of_perfect_detections_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, gts) = fixture_records();
    let dets: Vec<DetectionRecord> = gts
        .iter()
        .map(|g| DetectionRecord {
            score: Some(1.0),
            ..g.clone()
        })
        .collect();
    let det_path = tmp.path().join("dets.txt");
    let gt_path = tmp.path().join("gts.txt");
    write_detections(&det_path, &dets).unwrap();
    write_detections(&gt_path, &gts).unwrap();

    let out = caf(&["eval", "--dets", det_path.to_str().unwrap(), "--gts", gt_path.to_str().unwrap()]);
    assert_code(&out, 0);
    let text = stdout_text(&out);
    for key in ["map50", "map50_95", "precision", "recall"] {
        assert_eq!(key_value(&text, key), "1", "{key} of a perfect detector");
    }
}

#[test]
fn eval_with_a_missing_file_leaves_no_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let det_path = tmp.path().join("dets.txt");
    write_detections(&det_path, &fixture_records().0).unwrap();
    let report = tmp.path().join("report.txt");

    let out = caf(&[
        "eval",
        "--dets", det_path.to_str().unwrap(),
        "--gts", tmp.path().join("nope.txt").to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(!report.exists(), "failed eval must not write a report");
}

#[test]
fn eval_checkpoint_mode_runs_a_dataset_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap(), "--count", "3"];
    args.extend_from_slice(TINY_SCENE);
    assert_code(&caf(&args), 0);

    let ck = tmp.path().join("m.ck");
    let mut args = vec![
        "train", "--out", ck.to_str().unwrap(), "--steps", "2", "--lr", "0.001",
        "--batch", "1", "--no-caf-block", "--train-images", "1", "--val-images", "1", "--val-every", "100",
    ];
    args.extend_from_slice(TINY_SCENE);
    assert_code(&caf(&args), 0);

    let report = tmp.path().join("report.txt");
    let out = caf(&[
        "eval",
        "--checkpoint", ck.to_str().unwrap(),
        "--dataset", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = stdout_text(&out);
    let map50: f64 = key_value(&text, "map50").parse().unwrap();
    assert!((0.0..=1.0).contains(&map50));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);
}

#[test]
fn gradcheck_prints_a_table_and_gates_on_tolerance() {
    let out = caf(&["gradcheck", "--samples", "10"]);
    assert_code(&out, 0);
    let text = stdout_text(&out);
    assert!(text.lines().filter(|l| l.ends_with("pass")).count() >= 20);
    assert!(text.contains("max_rel_err"));

    let out = caf(&["gradcheck", "--samples", "10", "--eps", "10"]);
    assert_code(&out, 3);
}

#[test]
fn bench_emits_csv_with_the_attention_count_comparison() {
    let out = caf(&["bench", "--reps", "1"]);
    assert_code(&out, 0);
    let text = stdout_text(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "op,n,c,h,w,reps,median_us,var_us2,mults_channel,mults_spatial"
    );
    let mut attention_rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 10, "ragged row {line:?}");
        let (c, h, w): (u128, u128, u128) =
            (fields[2].parse().unwrap(), fields[3].parse().unwrap(), fields[4].parse().unwrap());
        let _median: f64 = fields[6].parse().unwrap();
        if !fields[8].is_empty() {
            attention_rows += 1;
            let channel: u128 = fields[8].parse().unwrap();
            let spatial: u128 = fields[9].parse().unwrap();
            let hw = h * w;
            if hw > c {
                assert!(channel < spatial, "{line}: channel count must win for hw > c");
            } else if hw == c {
                assert_eq!(channel, spatial, "{line}: counts coincide when hw == c");
            } else {
                assert!(channel > spatial, "{line}: spatial count wins below the crossover");
            }
        }
    }
    assert!(attention_rows >= 8, "expected both attention ops across the sweep");
}

#[test]
fn forward_applies_a_checkpoint_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("m.ck");
    let mut args = vec![
        "train", "--out", ck.to_str().unwrap(), "--steps", "0",
        "--train-images", "1", "--val-images", "1",
    ];
    args.extend_from_slice(TINY_SCENE);
    assert_code(&caf(&args), 0);

    let input = tmp.path().join("in.ten");
    let img = Tensor4::<f32>::new((1, 3, 32, 32), vec![0.25; 3 * 32 * 32]).unwrap();
    caf_core::io::write_tensor(&input, &img).unwrap();

    let (o1, o2) = (tmp.path().join("o1.ten"), tmp.path().join("o2.ten"));
    for out_path in [&o1, &o2] {
        let out = caf(&[
            "forward",
            "--checkpoint", ck.to_str().unwrap(),
            "--input", input.to_str().unwrap(),
            "--out", out_path.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    }
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    let preds: Tensor4<f32> = read_tensor(&o1).unwrap();
    assert_eq!(preds.shape(), (1, 5 + 1, 4, 4));

    let bad = tmp.path().join("bad.ten");
    let wrong = Tensor4::<f32>::new((1, 2, 32, 32), vec![0.1; 2 * 32 * 32]).unwrap();
    caf_core::io::write_tensor(&bad, &wrong).unwrap();
    let out = caf(&[
        "forward",
        "--checkpoint", ck.to_str().unwrap(),
        "--input", bad.to_str().unwrap(),
        "--out", tmp.path().join("nope.ten").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_code(&caf(&["train", "--no-such-flag"]), 1);
    assert_code(&caf(&[]), 1);
    assert_code(&caf(&["eval"]), 1);
    assert_code(&caf(&["--help"]), 0);
    let out = caf(&["gen-data", "--out", "/tmp/x", "--radii", "banana"]);
    assert_code(&out, 1);
}

#[test]
fn perfect_boxes_survive_the_detection_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let boxes = vec![
        DetBox::new(1.5, 2.25, 10.0, 12.5, 0, 0.875).unwrap(),
        DetBox::new(0.0, 0.0, 3.0, 3.0, 2, 0.5).unwrap(),
    ];
    let records: Vec<DetectionRecord> = boxes.iter().map(|b| DetectionRecord::from_box("img", b, true)).collect();
    let path = tmp.path().join("d.txt");
    write_detections(&path, &records).unwrap();
    let back = read_detections(&path).unwrap();
    assert_eq!(records, back);
}
