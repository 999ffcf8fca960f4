//! SGD training loop with warmup, linear decay and checkpointing.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::GateMode;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataio::{stack_images, Sample};
use crate::detector::Model;
use crate::error::{Error, Result};
use crate::eval::{evaluate, PostConfig};
use crate::loss::{build_targets, detection_loss_on_graph, Annotation, LossComponents, LossWeights};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`, or as an absolute rate
    /// when `absolute_final_lr` is set.
    pub lrf: f64,
    pub absolute_final_lr: bool,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub warmup_bias_lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr0: 0.0032,
            lrf: 0.12,
            absolute_final_lr: false,
            batch_size: 16,
            warmup_epochs: 2.0,
            warmup_bias_lr: 0.05,
            epochs: 100,
            momentum: 0.937,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.absolute_final_lr {
            if !(self.lrf > 0.0 && self.lrf.is_finite()) {
                return bad(format!("absolute lrf must be positive, got {}", self.lrf));
            }
        } else if !(self.lrf > 0.0 && self.lrf <= 1.0) {
            return bad(format!("lrf must lie in (0, 1], got {}", self.lrf));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!(
                "warmup_epochs must lie in [0, epochs), got {} with {} epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.warmup_bias_lr >= 0.0 && self.warmup_bias_lr.is_finite()) {
            return bad(format!(
                "warmup_bias_lr must be non-negative, got {}",
                self.warmup_bias_lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Linearly decayed rate at fractional epoch `e`, before warmup.
    pub fn scheduled(&self, e: f64) -> f64 {
        let ratio = if self.absolute_final_lr {
            self.lrf / self.lr0
        } else {
            self.lrf
        };
        self.lr0 * ((1.0 - e / self.epochs as f64) * (1.0 - ratio) + ratio)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `(weight lr, bias lr)` at fractional epoch `e`.
pub fn lr_at(e: f64, hp: &HyperParams) -> (f64, f64) {
    let s = hp.scheduled(e);
    if e < hp.warmup_epochs {
        let t = e / hp.warmup_epochs;
        (s * t, hp.warmup_bias_lr + (s - hp.warmup_bias_lr) * t)
    } else {
        (s, s)
    }
}

/// SGD with momentum. Weight decay applies to conv weights outside the
/// attention blocks only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr_weight: f64, lr_bias: f64) {
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (lr, decay) = match p.kind {
                ParamKind::Bias => (lr_bias, 0.0),
                ParamKind::Weight if p.attention => (lr_weight, 0.0),
                ParamKind::Weight => (lr_weight, self.weight_decay),
            };
            for ((w, &d), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + d + decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Weight learning rate at the epoch's last step.
    pub lr: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub steps: usize,
    pub val_map50: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:.8} loss_box={:.6} loss_obj={:.6} loss_cls={:.6} val_map50=",
            self.epoch, self.lr, self.loss_box, self.loss_obj, self.loss_cls
        )?;
        match self.val_map50 {
            Some(m) => write!(f, "{m:.6}"),
            None => write!(f, "na"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub loss: LossWeights,
    /// Thresholds for the per-epoch validation pass.
    pub post: PostConfig,
    /// Run validation every this many epochs (the last epoch always runs).
    pub eval_interval: usize,
    /// Where `best.ckpt`, `last.ckpt` and `train.log` go; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            loss: LossWeights::default(),
            post: PostConfig {
                conf_thresh: 0.001,
                iou_thresh: crate::postprocess::DEFAULT_IOU_THRESH,
            },
            eval_interval: 1,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub log: Vec<EpochLog>,
    pub total_steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_map50: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";

/// One forward/backward pass on a batch; returns loss parts and parameter
/// gradients in store order.
pub fn loss_and_grads(
    model: &Model,
    images: &Tensor,
    annotations: &[Vec<Annotation>],
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = model.params.register(&mut g, true);
    let x = g.constant(images.clone());
    let preds = model.forward(&mut g, &vars, x, GateMode::Active)?;
    for (s, v) in preds.scales.iter().enumerate() {
        g.value(*v).assert_finite(&format!("predictions[scale {s}]"))?;
    }
    let targets = build_targets(annotations, &model.cfg);
    let (loss, parts) = detection_loss_on_graph(&mut g, &preds, &targets, &model.cfg, weights)?;
    for (name, v) in [
        ("loss_box", parts.box_loss),
        ("loss_obj", parts.obj_loss),
        ("loss_cls", parts.cls_loss),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                name: name.into(),
                index: 0,
                value: v,
            });
        }
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params.iter())
        .map(|(v, p)| {
            let grad = g.grad(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            grad.assert_finite(&format!("grad[{}]", p.name))?;
            Ok(grad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, grads))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. Data order comes from one generator seeded with
/// `hp.seed`, so equal inputs give bit-identical weights.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    hp: &HyperParams,
    opts: &TrainOptions,
) -> Result<TrainingRun> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training split is empty"));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(TRAIN_LOG);
        fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    }
    let size = model.cfg.input_size;
    let steps = hp.steps_per_epoch(train_set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut sgd = Sgd::new(&model.params, hp.momentum, hp.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut run = TrainingRun {
        log: Vec::with_capacity(hp.epochs),
        total_steps: 0,
        best_epoch: None,
        best_val_map50: None,
        best_checkpoint: None,
        last_checkpoint: None,
    };

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut lr = 0.0;
        for (step, idx) in order.chunks(hp.batch_size).enumerate() {
            let (lr_w, lr_b) = lr_at(epoch as f64 + step as f64 / steps as f64, hp);
            lr = lr_w;
            let batch: Vec<Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let images = stack_images(&batch)?;
            let anns: Vec<Vec<Annotation>> = batch.into_iter().map(|s| s.annotations).collect();
            let (parts, grads) = loss_and_grads(model, &images, &anns, &opts.loss).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch: epoch + 1,
                    step: step + 1,
                    detail: e.to_string(),
                },
                other => other,
            })?;
            sgd.step(&mut model.params, &grads, lr_w, lr_b);
            sums[0] += parts.box_loss;
            sums[1] += parts.obj_loss;
            sums[2] += parts.cls_loss;
            run.total_steps += 1;
        }

        let last = epoch + 1 == hp.epochs;
        let val_map50 = if !val_set.is_empty() && ((epoch + 1) % opts.eval_interval.max(1) == 0 || last) {
            let (report, _) = evaluate(&*model, val_set, model.cfg.num_classes, size, &opts.post, hp.batch_size)?;
            Some(report.map50)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss_box: sums[0] / steps as f64,
            loss_obj: sums[1] / steps as f64,
            loss_cls: sums[2] / steps as f64,
            steps,
            val_map50,
        };
        log::info!("{entry}");

        let improved = match (val_map50, run.best_val_map50) {
            (Some(m), Some(best)) => m > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            run.best_val_map50 = val_map50;
            run.best_epoch = Some(epoch + 1);
        }
        if let Some(dir) = &opts.out_dir {
            append_line(&dir.join(TRAIN_LOG), &entry.to_string())?;
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                val_map50,
            };
            if improved {
                let p = dir.join(BEST_CHECKPOINT);
                checkpoint::save(&p, model, &meta)?;
                run.best_checkpoint = Some(p);
            }
            let p = dir.join(LAST_CHECKPOINT);
            checkpoint::save(&p, model, &meta)?;
            run.last_checkpoint = Some(p);
        }
        run.log.push(entry);
    }
    Ok(run)
}
