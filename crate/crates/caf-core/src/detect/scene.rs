//! Synthetic scenes: anti-aliased colored discs on a noisy background,
//! with tight ground-truth boxes. Classes differ by radius range and color,
//! and the smallest class is only a few pixels across on purpose.

use crate::error::{CoreError, Result};
use crate::metrics::DetBox;
use crate::tensor::Tensor4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Per-class disc radius range in pixels, inclusive; its length is the
    /// class count.
    pub radius_ranges: Vec<(f64, f64)>,
    /// Inclusive range of object counts per image.
    pub objects_range: (usize, usize),
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Width in pixels of the soft disc edge; 0 renders hard edges.
    pub blur: f64,
    pub seed: u64,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.35, 0.35],
    [0.35, 0.90, 0.45],
    [0.40, 0.50, 0.95],
    [0.90, 0.85, 0.30],
    [0.85, 0.40, 0.90],
    [0.35, 0.85, 0.90],
];

const BACKGROUND: f64 = 0.12;

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            radius_ranges: vec![(3.0, 5.0), (6.0, 9.0), (10.0, 13.0)],
            objects_range: (2, 5),
            noise: 0.04,
            blur: 1.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn classes(&self) -> usize {
        self.radius_ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::Config("scene dimensions must be positive".into()));
        }
        if self.radius_ranges.is_empty() {
            return Err(CoreError::Config("at least one class is required".into()));
        }
        if self.radius_ranges.len() > PALETTE.len() {
            return Err(CoreError::Config(format!(
                "at most {} classes are supported",
                PALETTE.len()
            )));
        }
        let half = (self.height.min(self.width) as f64) / 2.0;
        for (i, &(lo, hi)) in self.radius_ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo < 1.0 || hi < lo {
                return Err(CoreError::Config(format!(
                    "class {i} radius range ({lo}, {hi}) is invalid"
                )));
            }
            if hi + 1.0 >= half {
                return Err(CoreError::Config(format!(
                    "class {i} radius {hi} does not fit a {}x{} image",
                    self.height, self.width
                )));
            }
        }
        if self.objects_range.0 > self.objects_range.1 {
            return Err(CoreError::Config(format!(
                "object count range ({}, {}) is inverted",
                self.objects_range.0, self.objects_range.1
            )));
        }
        if self.noise < 0.0 || self.blur < 0.0 || !self.noise.is_finite() || !self.blur.is_finite() {
            return Err(CoreError::Config("noise and blur must be non-negative".into()));
        }
        Ok(())
    }
}

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
    class: usize,
    brightness: f64,
}

/// Render scene `index`. Deterministic in `(cfg.seed, index)`: the seed
/// picks the generator, the index picks its stream.
pub fn gen_scene(cfg: &SceneConfig, index: u64) -> Result<(Tensor4<f32>, Vec<DetBox>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let (h, w) = (cfg.height, cfg.width);
    let count = rng.gen_range(cfg.objects_range.0..=cfg.objects_range.1);

    let mut discs: Vec<Disc> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let class = rng.gen_range(0..cfg.classes());
            let (lo, hi) = cfg.radius_ranges[class];
            let r = rng.gen_range(lo..=hi);
            let cx = rng.gen_range(r + 1.0..w as f64 - r - 1.0);
            let cy = rng.gen_range(r + 1.0..h as f64 - r - 1.0);
            let brightness = rng.gen_range(0.75..1.0);
            let separated = discs.iter().all(|d| {
                let dist = ((d.cx - cx).powi(2) + (d.cy - cy).powi(2)).sqrt();
                dist >= 0.9 * (d.r + r)
            });
            if separated {
                discs.push(Disc {
                    cx,
                    cy,
                    r,
                    class,
                    brightness,
                });
                break;
            }
        }
    }

    let mut img = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let n = if cfg.noise > 0.0 {
                    cfg.noise * rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = (BACKGROUND + n).clamp(0.0, 1.0);
            }
        }
    }

    for d in &discs {
        let color = PALETTE[d.class];
        let edge = cfg.blur.max(1e-6);
        let reach = d.r + edge;
        let y0 = (d.cy - reach).floor().max(0.0) as usize;
        let y1 = ((d.cy + reach).ceil() as usize).min(h - 1);
        let x0 = (d.cx - reach).floor().max(0.0) as usize;
        let x1 = ((d.cx + reach).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dist = ((x as f64 + 0.5 - d.cx).powi(2) + (y as f64 + 0.5 - d.cy).powi(2)).sqrt();
                let alpha = ((d.r + edge / 2.0 - dist) / edge).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for ch in 0..3 {
                        let px = &mut img[(ch * h + y) * w + x];
                        *px = *px * (1.0 - alpha) + color[ch] * d.brightness * alpha;
                    }
                }
            }
        }
    }

    let data: Vec<f32> = img.into_iter().map(|v| v as f32).collect();
    let image = Tensor4::new((1, 3, h, w), data)?;
    let gts = discs
        .iter()
        .map(|d| DetBox::new(d.cx - d.r, d.cy - d.r, d.cx + d.r, d.cy + d.r, d.class, 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((image, gts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_reproduce_bit_identically() {
        let cfg = SceneConfig::default();
        let (a_img, a_gts) = gen_scene(&cfg, 5).unwrap();
        let (b_img, b_gts) = gen_scene(&cfg, 5).unwrap();
        assert_eq!(a_img.data(), b_img.data());
        assert_eq!(a_gts, b_gts);
        let (c_img, _) = gen_scene(&cfg, 6).unwrap();
        assert_ne!(a_img.data(), c_img.data());
    }

    #[test]
    fn empty_object_range_gives_pure_noise() {
        let cfg = SceneConfig {
            objects_range: (0, 0),
            ..SceneConfig::default()
        };
        let (img, gts) = gen_scene(&cfg, 0).unwrap();
        assert!(gts.is_empty());
        assert_eq!(img.shape(), (1, 3, 64, 64));
        for &v in img.data() {
            assert!((BACKGROUND as f32 - cfg.noise as f32..=BACKGROUND as f32 + cfg.noise as f32)
                .contains(&v));
        }
    }

    #[test]
    fn boxes_tightly_bound_their_discs() {
        let cfg = SceneConfig {
            noise: 0.0,
            objects_range: (3, 3),
            ..SceneConfig::default()
        };
        let (img, gts) = gen_scene(&cfg, 11).unwrap();
        assert_eq!(gts.len(), 3);
        for g in &gts {
            // the box must be square with side 2r and inside the image
            let (bw, bh) = (g.x2 - g.x1, g.y2 - g.y1);
            assert!((bw - bh).abs() < 1e-9);
            let r = bw / 2.0;
            let (lo, hi) = cfg.radius_ranges[g.class_id];
            assert!(r >= lo && r <= hi, "radius {r} outside class range");
            assert!(g.x1 >= 0.0 && g.y1 >= 0.0);
            assert!(g.x2 <= 64.0 && g.y2 <= 64.0);

            // center pixel clearly brighter than background in some channel
            let (cx, cy) = (((g.x1 + g.x2) / 2.0) as usize, ((g.y1 + g.y2) / 2.0) as usize);
            let lit = (0..3).any(|ch| img.at(0, ch, cy, cx) > 0.3);
            assert!(lit, "disc center looks like background");
        }
    }

    #[test]
    fn separation_keeps_discs_mostly_disjoint() {
        let cfg = SceneConfig {
            objects_range: (5, 5),
            ..SceneConfig::default()
        };
        for idx in 0..10 {
            let (_, gts) = gen_scene(&cfg, idx).unwrap();
            for (i, a) in gts.iter().enumerate() {
                for b in &gts[i + 1..] {
                    assert!(crate::metrics::iou(a, b) < 0.35, "discs overlap heavily");
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.radius_ranges[0] = (5.0, 3.0);
        assert!(gen_scene(&cfg, 0).is_err());
        let cfg = SceneConfig {
            radius_ranges: vec![(3.0, 40.0)],
            ..SceneConfig::default()
        };
        assert!(gen_scene(&cfg, 0).is_err());
        let cfg = SceneConfig {
            objects_range: (4, 2),
            ..SceneConfig::default()
        };
        assert!(gen_scene(&cfg, 0).is_err());
    }
}
