pub mod bench;
pub mod eval;
pub mod forward;
pub mod gen_data;
pub mod gradcheck;
pub mod train;

use crate::fail::Failure;
use crate::SceneFlags;
use caf_core::detect::SceneConfig;

/// "3-5,6-9" -> [(3.0, 5.0), (6.0, 9.0)].
fn parse_radii(text: &str) -> Result<Vec<(f64, f64)>, Failure> {
    let mut ranges = Vec::new();
    for part in text.split(',') {
        let (lo, hi) = part
            .trim()
            .split_once('-')
            .ok_or_else(|| Failure::usage(format!("radius range {part:?} is not LO-HI")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("radius {s:?} is not a number")))
        };
        ranges.push((parse(lo)?, parse(hi)?));
    }
    Ok(ranges)
}

pub fn scene_config(flags: &SceneFlags) -> Result<SceneConfig, Failure> {
    let cfg = SceneConfig {
        height: flags.height,
        width: flags.width,
        radius_ranges: parse_radii(&flags.radii)?,
        objects_range: (flags.min_objects, flags.max_objects),
        noise: flags.noise,
        blur: flags.blur,
        seed: flags.scene_seed,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}
