use crate::fail::Failure;
use caf_core::detect::{decode_predictions, detector_forward, DecodeConfig, ToyDetectorParams};
use caf_core::io::{
    atomic_write, read_detections, read_tensor, records_to_eval_inputs, Checkpoint,
    DatasetManifest, DetectionRecord,
};
use caf_core::metrics::{evaluate, DetBox, EvalReport, PR_SCORE_THRESH};
use caf_core::tensor::Tensor4;
use std::fmt::Write as _;
use std::path::PathBuf;

pub struct EvalArgs {
    pub dets: Option<PathBuf>,
    pub gts: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub classes: Option<usize>,
    pub conf: f64,
    pub nms: f64,
    pub out: Option<PathBuf>,
}

fn inferred_classes(records: &[&DetectionRecord], flag: Option<usize>) -> Result<usize, Failure> {
    if let Some(n) = flag {
        return Ok(n);
    }
    records
        .iter()
        .map(|r| r.class_id + 1)
        .max()
        .ok_or_else(|| Failure::data("no records to infer a class count from; pass --classes"))
}

fn render(report: &EvalReport, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        writeln!(out, "# {line}").unwrap();
    }
    writeln!(
        out,
        "# precision/recall counted at score >= {PR_SCORE_THRESH}, IoU 0.5"
    )
    .unwrap();
    writeln!(out, "map50={}", report.map50).unwrap();
    writeln!(out, "map50_95={}", report.map50_95).unwrap();
    writeln!(out, "precision={}", report.precision).unwrap();
    writeln!(out, "recall={}", report.recall).unwrap();
    writeln!(out, "true_positives={}", report.true_positives).unwrap();
    writeln!(out, "false_positives={}", report.false_positives).unwrap();
    writeln!(out, "false_negatives={}", report.false_negatives).unwrap();
    for (c, row) in report.per_class_ap.iter().enumerate() {
        writeln!(out, "gt_count.class{c}={}", report.gt_counts[c]).unwrap();
        match row[0] {
            Some(ap) => writeln!(out, "ap50.class{c}={ap}").unwrap(),
            None => writeln!(out, "ap50.class{c}=none").unwrap(),
        }
    }
    out
}

fn eval_files(args: &EvalArgs) -> Result<(EvalReport, Vec<String>), Failure> {
    let dets = read_detections(args.dets.as_ref().expect("mode checked"))?;
    let gts = read_detections(args.gts.as_ref().expect("mode checked"))?;
    let all: Vec<&DetectionRecord> = dets.iter().chain(gts.iter()).collect();
    let classes = inferred_classes(&all, args.classes)?;
    let (det_boxes, gt_boxes, ids) = records_to_eval_inputs(&dets, &gts);
    let report = evaluate(&det_boxes, &gt_boxes, classes)?;
    Ok((report, vec![format!("{} images, {classes} classes", ids.len())]))
}

fn eval_checkpoint(args: &EvalArgs) -> Result<(EvalReport, Vec<String>), Failure> {
    let decode = DecodeConfig {
        conf_thresh: args.conf,
        nms_iou: args.nms,
    };
    decode.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let dir = args.dataset.as_ref().expect("mode checked");
    let params =
        ToyDetectorParams::<f32>::from_checkpoint(&Checkpoint::read(args.checkpoint.as_ref().expect("mode checked"))?)?;
    let manifest = DatasetManifest::read(&dir.join("manifest.txt"))?;
    if params.classes() != manifest.classes {
        return Err(Failure::data(format!(
            "checkpoint has {} classes but the dataset manifest says {}",
            params.classes(),
            manifest.classes
        )));
    }

    let gt_records = read_detections(&dir.join("gts.txt"))?;
    for r in &gt_records {
        if !manifest.image_ids.contains(&r.image_id) {
            return Err(Failure::data(format!(
                "gts.txt mentions {:?}, which is not in the manifest",
                r.image_id
            )));
        }
    }

    let mut dets: Vec<Vec<DetBox>> = Vec::with_capacity(manifest.image_ids.len());
    let mut gts: Vec<Vec<DetBox>> = Vec::with_capacity(manifest.image_ids.len());
    for id in &manifest.image_ids {
        let img: Tensor4<f32> = read_tensor(&dir.join("images").join(format!("{id}.ten")))?;
        let preds = detector_forward(&img, &params)?;
        let mut decoded =
            decode_predictions(&preds, params.classes(), params.cell() as f64, &decode)?;
        dets.push(decoded.pop().expect("one image in, one list out"));
        gts.push(
            gt_records
                .iter()
                .filter(|r| &r.image_id == id)
                .map(|r| r.to_box())
                .collect(),
        );
    }
    let report = evaluate(&dets, &gts, manifest.classes)?;
    let header = vec![format!(
        "{} images, {} classes, decoded at conf {} nms {}",
        manifest.image_ids.len(),
        manifest.classes,
        decode.conf_thresh,
        decode.nms_iou
    )];
    Ok((report, header))
}

pub fn run(args: EvalArgs) -> Result<(), Failure> {
    let file_mode = args.dets.is_some();
    let ck_mode = args.checkpoint.is_some();
    let (report, header) = if file_mode && !ck_mode {
        eval_files(&args)?
    } else if ck_mode && !file_mode {
        eval_checkpoint(&args)?
    } else {
        return Err(Failure::usage(
            "pass either --dets with --gts, or --checkpoint with --dataset",
        ));
    };

    let text = render(&report, &header);
    print!("{text}");
    if let Some(path) = &args.out {
        atomic_write(path, text.as_bytes())?;
    }
    Ok(())
}
