//! Dataset plumbing: labels, images, synthetic scenes and split manifests.

pub mod image;
pub mod labels;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Units};
use crate::error::{Error, Result};
use crate::loss::Annotation;
use crate::par;
use crate::tensor::Tensor;

pub use image::{load_image, RgbImage};
pub use labels::{parse_label_file, write_label_file};
pub use synth::{generate_scene, SynthSceneConfig};

/// Train / validation / test proportions (4000 / 800 / 200 of 5000).
pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.16, 0.04];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

/// Split membership for every image of a dataset. Paths are relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Split sizes for `n` items by the largest-remainder method.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let quotas = SPLIT_RATIOS.map(|r| r * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order = [0, 1, 2];
    // stable: equal remainders keep train, val, test order
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Seeded shuffle of `0..n` cut into train/val/test. Returns the split of
/// each index.
pub fn split_assignment(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 3 {
        return Err(Error::invalid(
            "split_dataset",
            format!("need at least 3 items, got {n}"),
        ));
    }
    let sizes = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for (pos, &idx) in order.iter().enumerate() {
        out[idx] = if pos < sizes[0] {
            Split::Train
        } else if pos < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Manifest over `n` images named `images/NNNNNN.png` with matching labels.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetManifest> {
    let splits = split_assignment(n, seed)?;
    Ok(DatasetManifest {
        seed,
        entries: splits
            .into_iter()
            .enumerate()
            .map(|(i, split)| ManifestEntry {
                image: PathBuf::from(format!("images/{i:06}.png")),
                label: PathBuf::from(format!("labels/{i:06}.txt")),
                split,
            })
            .collect(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// One model-ready image with its annotations in letterboxed coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    /// Reads an image and its YOLO label file, letterboxing both to `target`.
    pub fn load(image_path: &Path, label_path: &Path, target: usize, num_classes: usize) -> Result<Sample> {
        let raw = image::read_image(image_path)?;
        let (tensor, lb) = image::letterbox(&raw, target);
        let text = match fs::read_to_string(label_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(label_path, e)),
        };
        let anns = parse_label_file(&text, num_classes).map_err(|e| Error::Image {
            path: label_path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let t = target as f64;
        let annotations = anns
            .into_iter()
            .map(|a| {
                let [cx, cy, w, h] = a.cxcywh();
                let (sx, sy) = (lb.new_w as f64 / t, lb.new_h as f64 / t);
                Annotation {
                    class_id: a.class_id,
                    bbox: BBox::center(
                        cx * sx + lb.pad_x as f64 / t,
                        cy * sy + lb.pad_y as f64 / t,
                        w * sx,
                        h * sy,
                        Units::Normalized,
                    ),
                }
            })
            .collect();
        Ok(Sample {
            image: tensor,
            annotations,
        })
    }
}

/// Loads every entry of `split`, in manifest order.
pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    target: usize,
    num_classes: usize,
) -> Result<Vec<Sample>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    par::map_range(entries.len(), |i| {
        Sample::load(
            &dir.join(&entries[i].image),
            &dir.join(&entries[i].label),
            target,
            num_classes,
        )
    })
    .into_iter()
    .collect()
}

/// Stacks `[3,S,S]` images into a `[B,3,S,S]` batch.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("stack_images", "empty batch"))?
        .image
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.iter().product::<usize>());
    for s in samples {
        if s.image.shape() != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                left: first,
                right: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

/// Writes `n` synthetic scenes plus labels and a split manifest into `dir`.
pub fn write_synthetic_dataset(dir: &Path, cfg: &SynthSceneConfig, n: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    let manifest = split_dataset(n, cfg.seed)?;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let results = par::map_range(n, |i| -> Result<()> {
        let (img, anns) = generate_scene(cfg, i as u64);
        let entry = &manifest.entries[i];
        image::write_png(&dir.join(&entry.image), &img)?;
        let lp = dir.join(&entry.label);
        fs::write(&lp, write_label_file(&anns)).map_err(|e| Error::io(&lp, e))
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    manifest.save(dir)?;
    Ok(manifest)
}

/// In-memory synthetic samples at the generator's own resolution.
pub fn synthetic_samples(cfg: &SynthSceneConfig, n: usize, target: usize) -> Vec<Sample> {
    par::map_range(n, |i| {
        let (img, anns) = generate_scene(cfg, i as u64);
        let (image, lb) = image::letterbox(&img, target);
        let t = target as f64;
        let annotations = anns
            .into_iter()
            .map(|a| {
                let [cx, cy, w, h] = a.cxcywh();
                let (sx, sy) = (lb.new_w as f64 / t, lb.new_h as f64 / t);
                Annotation {
                    class_id: a.class_id,
                    bbox: BBox::center(
                        cx * sx + lb.pad_x as f64 / t,
                        cy * sy + lb.pad_y as f64 / t,
                        w * sx,
                        h * sy,
                        Units::Normalized,
                    ),
                }
            })
            .collect();
        Sample { image, annotations }
    })
}
