use super::{image_id, scene_config};
use crate::fail::Failure;
use crate::SceneFlags;
use caf_core::detect::gen_scene;
use caf_core::io::{write_detections, write_tensor, DatasetManifest, DetectionRecord};
use std::fs;
use std::path::Path;

/// Layout under `out`: `manifest.txt`, `gts.txt`, `images/<id>.ten`. The
/// directory is assembled under a `.partial` suffix and renamed into place
/// only once complete.
pub fn run(out: &Path, count: usize, flags: &SceneFlags) -> Result<(), Failure> {
    let cfg = scene_config(flags)?;
    if out.exists() {
        return Err(Failure::data(format!("{} already exists", out.display())));
    }
    let staging = out.with_extension("partial");
    if staging.exists() {
        return Err(Failure::data(format!(
            "{} already exists; remove it before regenerating",
            staging.display()
        )));
    }

    let build = || -> Result<usize, Failure> {
        fs::create_dir_all(staging.join("images"))?;
        let mut records = Vec::new();
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = image_id(i);
            let (img, gts) = gen_scene(&cfg, i as u64)?;
            write_tensor(&staging.join("images").join(format!("{id}.ten")), &img)?;
            records.extend(gts.iter().map(|b| DetectionRecord::from_box(&id, b, false)));
            ids.push(id);
        }
        write_detections(&staging.join("gts.txt"), &records)?;
        DatasetManifest {
            seed: cfg.seed,
            height: cfg.height,
            width: cfg.width,
            classes: cfg.classes(),
            image_ids: ids,
        }
        .write(&staging.join("manifest.txt"))?;
        Ok(records.len())
    };

    match build() {
        Ok(boxes) => {
            fs::rename(&staging, out)?;
            println!("wrote {count} images, {boxes} boxes to {}", out.display());
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}
