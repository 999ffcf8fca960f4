//! Run configuration: one TOML file covering every stage of the pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthSceneConfig;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::PostConfig;
use crate::loss::LossWeights;
use crate::postprocess::{DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH};
use crate::train::HyperParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Images written by `synth`.
    pub num_images: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { num_images: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory (images/, labels/, manifest.json).
    pub data_dir: PathBuf,
    /// Training outputs: checkpoints, log, reports.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Confidence cut-off for `detect`.
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    /// Confidence cut-off while computing AP (validation and `eval`).
    pub eval_conf_thresh: f64,
    /// Validate every this many epochs during training.
    pub eval_interval: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            conf_thresh: DEFAULT_CONF_THRESH,
            iou_thresh: DEFAULT_IOU_THRESH,
            eval_conf_thresh: 0.001,
            eval_interval: 1,
        }
    }
}

impl PostprocessConfig {
    pub fn detect(&self) -> PostConfig {
        PostConfig {
            conf_thresh: self.conf_thresh,
            iou_thresh: self.iou_thresh,
        }
    }

    pub fn eval(&self) -> PostConfig {
        PostConfig {
            conf_thresh: self.eval_conf_thresh,
            iou_thresh: self.iou_thresh,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: HyperParams,
    pub loss: LossWeights,
    pub synth: SynthSceneConfig,
    pub dataset: DatasetConfig,
    pub paths: PathsConfig,
    pub postprocess: PostprocessConfig,
}

/// Every configuration key with a one-line description, as `section.key`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.num_classes", "number of object classes (1 = bird)"),
    ("model.input_size", "network input side in pixels, multiple of 32"),
    ("model.widths", "channel widths of the three backbone stages"),
    (
        "model.anchors",
        "optional 3x3 (w, h) anchors in pixels; default scales the reference set",
    ),
    ("model.cbam_enabled", "insert attention blocks"),
    (
        "model.cbam_placement",
        "\"backbone\" (after each stage) or \"neck\" (before each head)",
    ),
    ("model.cbam_reduction", "channel-attention MLP reduction ratio"),
    ("model.cbam_kernel", "spatial-attention kernel size (odd)"),
    ("model.cbam_mlp_bias", "biases in the channel-attention MLP"),
    ("train.lr0", "initial learning rate"),
    (
        "train.lrf",
        "final learning rate as a fraction of lr0 (absolute when absolute_final_lr)",
    ),
    ("train.absolute_final_lr", "read lrf as an absolute rate"),
    ("train.batch_size", "images per optimiser step"),
    ("train.warmup_epochs", "warmup length in (fractional) epochs"),
    ("train.warmup_bias_lr", "bias learning rate at the start of warmup"),
    ("train.epochs", "number of epochs"),
    ("train.momentum", "SGD momentum"),
    (
        "train.weight_decay",
        "L2 decay on conv weights outside attention blocks",
    ),
    ("train.seed", "seed for initialisation and data order"),
    ("loss.box_weight", "weight of the mean 1 - CIoU term"),
    ("loss.obj_weight", "weight of the objectness BCE term"),
    ("loss.cls_weight", "weight of the class BCE term"),
    ("loss.soft_objectness", "use CIoU instead of 1 as objectness target"),
    ("synth.image_size", "side of generated images in pixels"),
    ("synth.birds_min", "fewest birds per image"),
    ("synth.birds_max", "most birds per image"),
    ("synth.bird_scale_min", "smallest bird side as a fraction of the image"),
    ("synth.bird_scale_max", "largest bird side as a fraction of the image"),
    ("synth.clutter_level", "0..1 amount of masts and wave stripes"),
    ("synth.seed", "seed for scenes and the split"),
    ("dataset.num_images", "images written by synth"),
    ("paths.data_dir", "dataset directory"),
    ("paths.run_dir", "training output directory"),
    ("postprocess.conf_thresh", "confidence cut-off for detect"),
    ("postprocess.iou_thresh", "NMS IoU threshold"),
    ("postprocess.eval_conf_thresh", "confidence cut-off when computing AP"),
    ("postprocess.eval_interval", "validate every N epochs"),
];

/// `--help` appendix listing [`CONFIG_KEYS`].
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (TOML sections):\n");
    for (key, what) in CONFIG_KEYS {
        out.push_str(&format!("  {key:<32} {what}\n"));
    }
    out
}

fn check_thresh(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let l = &self.loss;
        for (name, w) in [
            ("box_weight", l.box_weight),
            ("obj_weight", l.obj_weight),
            ("cls_weight", l.cls_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be non-negative, got {w}")));
            }
        }
        if self.dataset.num_images < 3 {
            return Err(Error::Config(format!(
                "dataset.num_images must be at least 3 for a train/val/test split, got {}",
                self.dataset.num_images
            )));
        }
        let p = &self.postprocess;
        check_thresh("postprocess.conf_thresh", p.conf_thresh)?;
        check_thresh("postprocess.iou_thresh", p.iou_thresh)?;
        check_thresh("postprocess.eval_conf_thresh", p.eval_conf_thresh)?;
        if p.eval_interval == 0 {
            return Err(Error::Config("postprocess.eval_interval must be at least 1".into()));
        }
        Ok(())
    }
}
