//! Synthetic sea scenes with bird glyphs and exact ground-truth boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::iou;
use crate::bbox::{BBox, Units};
use crate::dataio::image::RgbImage;
use crate::error::{Error, Result};
use crate::loss::Annotation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneConfig {
    pub image_size: usize,
    pub birds_min: usize,
    pub birds_max: usize,
    /// Bird box side as a fraction of the image side.
    pub bird_scale_min: f64,
    pub bird_scale_max: f64,
    /// 0 = plain gradient sea, 1 = masts and wave stripes in most images.
    pub clutter_level: f64,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        SynthSceneConfig {
            image_size: 160,
            birds_min: 1,
            birds_max: 4,
            bird_scale_min: 0.05,
            bird_scale_max: 0.25,
            clutter_level: 0.3,
            seed: 0,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("synth image_size must be at least 16, got {}", self.image_size));
        }
        if self.birds_min > self.birds_max {
            return bad(format!("birds range {}..={} is empty", self.birds_min, self.birds_max));
        }
        let (lo, hi) = (self.bird_scale_min, self.bird_scale_max);
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return bad(format!("bird scale range {lo}..{hi} must be non-empty within (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return bad(format!("clutter_level {} outside [0, 1]", self.clutter_level));
        }
        Ok(())
    }
}

/// Bird pixels are dark with a low blue channel; the sea never is.
pub const BIRD_BLUE_MAX: u8 = 70;

/// Glyph mask in a `w × h` box: an elliptic body under a V of wings.
fn glyph_mask(w: usize, h: usize) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let body = (u / 0.32).powi(2) + ((v - 0.25) / 0.5).powi(2) <= 1.0;
            let au = u.abs();
            let wing = au >= 0.1 && {
                let centre = 0.15 - 0.95 * (au - 0.1) / 0.9;
                let half = 0.08 + 0.22 * (1.0 - au);
                (v - centre).abs() <= half
            };
            mask[y * w + x] = body || wing;
        }
    }
    mask
}

/// Renders scene `index` of the dataset described by `cfg`. The same
/// `(seed, index)` always gives the same pixels and boxes.
pub fn generate_scene(cfg: &SynthSceneConfig, index: u64) -> (RgbImage, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let s = cfg.image_size;
    let mut img = RgbImage::new(s, s);

    let horizon_tint: f64 = rng.gen_range(-15.0..15.0);
    for y in 0..s {
        let t = y as f64 / (s - 1) as f64;
        let r = 110.0 - 80.0 * t + horizon_tint;
        let g = 165.0 - 90.0 * t + horizon_tint;
        let b = 225.0 - 95.0 * t;
        for x in 0..s {
            img.put(x, y, [r as u8, g as u8, b as u8]);
        }
    }

    if rng.gen_bool(cfg.clutter_level) {
        let stripes = rng.gen_range(1..=1 + (cfg.clutter_level * 6.0) as usize);
        for _ in 0..stripes {
            let y = rng.gen_range(s / 2..s);
            for x in 0..s {
                let [r, g, b] = img.get(x, y);
                img.put(x, y, [r.saturating_add(40), g.saturating_add(40), b.saturating_add(25)]);
            }
        }
        let masts = rng.gen_range(0..=1 + (cfg.clutter_level * 1.5) as usize);
        for _ in 0..masts {
            let mw = (s / 40).max(1);
            let mh = rng.gen_range(s / 3..=s * 3 / 4);
            let mx = rng.gen_range(0..s - mw);
            for y in s - mh..s {
                for x in mx..mx + mw {
                    img.put(x, y, [235, 235, 240]);
                }
            }
        }
    }

    let count = rng.gen_range(cfg.birds_min..=cfg.birds_max);
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..count {
        for _attempt in 0..30 {
            let side = rng.gen_range(cfg.bird_scale_min..=cfg.bird_scale_max) * s as f64;
            let aspect = rng.gen_range(0.55..0.9);
            let gw = (side.round() as usize).clamp(4, s);
            let gh = ((side * aspect).round() as usize).clamp(3, s);
            let x0 = rng.gen_range(0..=s - gw);
            let y0 = rng.gen_range(0..=s - gh);
            let shade: u8 = rng.gen_range(20..55);
            let candidate = BBox::corner(x0 as f64, y0 as f64, (x0 + gw) as f64, (y0 + gh) as f64, Units::Pixels);
            if placed.iter().any(|p| iou(p, &candidate) > 0.0) {
                continue;
            }
            let mask = glyph_mask(gw, gh);
            let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..gh {
                for x in 0..gw {
                    if mask[y * gw + x] {
                        img.put(x0 + x, y0 + y, [shade, shade, shade + 10]);
                        minx = minx.min(x0 + x);
                        maxx = maxx.max(x0 + x);
                        miny = miny.min(y0 + y);
                        maxy = maxy.max(y0 + y);
                    }
                }
            }
            placed.push(candidate);
            let tight = BBox::corner(
                minx as f64,
                miny as f64,
                (maxx + 1) as f64,
                (maxy + 1) as f64,
                Units::Pixels,
            )
            .to_normalized(s as f64)
            .to_center();
            annotations.push(Annotation {
                class_id: 0,
                bbox: tight,
            });
            break;
        }
    }
    (img, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ModelConfig;
    use crate::loss::anchor_accepts;
    use proptest::prelude::*;

    #[test]
    fn fixed_count() {
        let cfg = SynthSceneConfig {
            birds_min: 1,
            birds_max: 1,
            ..Default::default()
        };
        for i in 0..20 {
            assert_eq!(generate_scene(&cfg, i).1.len(), 1);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthSceneConfig {
            seed: 42,
            clutter_level: 1.0,
            ..Default::default()
        };
        assert_eq!(generate_scene(&cfg, 3), generate_scene(&cfg, 3));
        assert_ne!(generate_scene(&cfg, 3).0, generate_scene(&cfg, 4).0);
    }

    #[test]
    fn glyph_pixels_inside_boxes() {
        let cfg = SynthSceneConfig {
            clutter_level: 1.0,
            ..Default::default()
        };
        for i in 0..30 {
            let (img, anns) = generate_scene(&cfg, i);
            let s = cfg.image_size as f64;
            let boxes: Vec<[f64; 4]> = anns.iter().map(|a| a.bbox.to_corner().to_pixels(s).coords).collect();
            let mut dark = 0;
            for y in 0..img.height {
                for x in 0..img.width {
                    if img.get(x, y)[2] <= BIRD_BLUE_MAX {
                        dark += 1;
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!(
                            boxes.iter().any(|b| px > b[0] && px < b[2] && py > b[1] && py < b[3]),
                            "scene {i}: bird pixel ({x},{y}) outside every box"
                        );
                    }
                }
            }
            assert!(dark > 0 || anns.is_empty());
            // boxes are tight: every edge row/column holds a bird pixel
            for b in &boxes {
                let b = b.map(|v| v.round() as usize);
                let col = |x: usize| (b[1]..b[3]).any(|y| img.get(x, y)[2] <= BIRD_BLUE_MAX);
                let row = |y: usize| (b[0]..b[2]).any(|x| img.get(x, y)[2] <= BIRD_BLUE_MAX);
                assert!(col(b[0]) && col(b[2] - 1));
                assert!(row(b[1]) && row(b[3] - 1));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(SynthSceneConfig::default().validate().is_ok());
        assert!(SynthSceneConfig {
            birds_min: 3,
            birds_max: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthSceneConfig {
            bird_scale_max: 1.2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_bird_fits_some_anchor(seed in 0u64..1000, index in 0u64..1000) {
            let cfg = SynthSceneConfig { seed, ..Default::default() };
            let model = ModelConfig::default();
            let s = model.input_size as f64;
            let anchors = model.anchors();
            for a in generate_scene(&cfg, index).1 {
                let [_, _, w, h] = a.cxcywh();
                prop_assert!(anchors.iter().flatten().any(|an| anchor_accepts([w * s, h * s], *an)));
            }
        }
    }
}
