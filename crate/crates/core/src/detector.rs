//! Miniature multi-scale anchor-based detector with optional attention
//! blocks.
//!
//! ```text
//! image ─ stem(s2) ─ stem(s2) ─ stage1(s2) ─ P3 ─────────────┐
//!                               stage2(s2) ─ P4 ──────┐      │
//!                               stage3(s2) ─ P5       │      │
//!   P5 ─ lat5 ─ up ─ cat(P4) ─ td4 ─ lat4 ─ up ─ cat(P3) ─ td3 ─ out3 (stride 8)
//!   out3 ─ down ─ cat(lat4) ─ bu4 ─ out4 (stride 16)
//!   out4 ─ down ─ cat(lat5) ─ bu5 ─ out5 (stride 32)
//! ```
//!
//! A stage is a stride-2 conv, two residual bottlenecks, then (optionally)
//! a CBAM block. All convs carry a bias and a SiLU except the 1x1 heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::{CbamBlock, CbamConfig, GateMode};
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const NUM_SCALES: usize = 3;
pub const ANCHORS_PER_SCALE: usize = 3;
pub const STRIDES: [usize; NUM_SCALES] = [8, 16, 32];

/// Reference anchors (pixels) for a 640 input; scaled by `input_size / 640`.
const BASE_ANCHORS: [[[f64; 2]; ANCHORS_PER_SCALE]; NUM_SCALES] = [
    [[10., 13.], [16., 30.], [33., 23.]],
    [[30., 61.], [62., 45.], [59., 119.]],
    [[116., 90.], [156., 198.], [373., 326.]],
];

pub type Anchors = [[[f64; 2]; ANCHORS_PER_SCALE]; NUM_SCALES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbamPlacement {
    /// After each backbone stage.
    Backbone,
    /// On each of the three neck outputs, before the heads.
    Neck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: usize,
    /// Channel widths of the three backbone stages.
    pub widths: [usize; 3],
    /// Explicit anchors in pixels; `None` scales the reference set.
    pub anchors: Option<Anchors>,
    pub cbam_enabled: bool,
    pub cbam_placement: CbamPlacement,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub cbam_mlp_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 1,
            input_size: 160,
            widths: [16, 32, 64],
            anchors: None,
            cbam_enabled: true,
            cbam_placement: CbamPlacement::Backbone,
            cbam_reduction: 16,
            cbam_kernel: 7,
            cbam_mlp_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {:?}", self.widths)));
        }
        if self
            .anchors()
            .iter()
            .flatten()
            .flatten()
            .any(|&v| v <= 0.0 || !v.is_finite())
        {
            return Err(Error::Config("anchors must be strictly positive".into()));
        }
        self.cbam_config(1).validate()
    }

    /// Anchors in pixels at the configured input size.
    pub fn anchors(&self) -> Anchors {
        self.anchors.unwrap_or_else(|| {
            let s = self.input_size as f64 / 640.0;
            BASE_ANCHORS.map(|scale| scale.map(|[w, h]| [w * s, h * s]))
        })
    }

    /// Per-anchor prediction vector length: 4 box terms, objectness, classes.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.input_size / STRIDES[scale]
    }

    pub fn cbam_config(&self, channels: usize) -> CbamConfig {
        CbamConfig {
            channels,
            reduction_ratio: self.cbam_reduction,
            spatial_kernel: self.cbam_kernel,
            mlp_bias: self.cbam_mlp_bias,
        }
    }

    fn stem_width(&self) -> usize {
        (self.widths[0] / 2).max(1)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv,
    expand: Conv,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Bottleneck {
            reduce: Conv::new(store, &format!("{name}.cv1"), ch, ch, 1, 1, true, false, rng),
            expand: Conv::new(store, &format!("{name}.cv2"), ch, ch, 3, 1, true, false, rng),
        }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = conv_silu(&self.reduce, g, vars, x)?;
        let h = conv_silu(&self.expand, g, vars, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    blocks: [Bottleneck; 2],
}

fn conv_silu(conv: &Conv, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
    let y = conv.forward(g, vars, x)?;
    Ok(g.silu(y))
}

/// Raw head outputs, one `[B, A, H, W, 5 + classes]` var per scale, with
/// the last axis laid out as `(tx, ty, tw, th, obj, cls...)`.
#[derive(Clone, Copy, Debug)]
pub struct RawPredictions {
    pub scales: [Var; NUM_SCALES],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    stem: [Conv; 2],
    stages: [Stage; 3],
    lat5: Conv,
    td4: Conv,
    lat4: Conv,
    td3: Conv,
    down3: Conv,
    bu4: Conv,
    down4: Conv,
    bu5: Conv,
    attention: Vec<CbamBlock>,
    heads: [Conv; NUM_SCALES],
}

/// Builds a model with deterministic seeded initialisation.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.clone(), seed)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let [w0, w1, w2] = cfg.widths;
        let sw = cfg.stem_width();

        let stem = [
            Conv::new(&mut s, "stem.0", 3, sw, 3, 2, true, false, r),
            Conv::new(&mut s, "stem.1", sw, sw, 3, 2, true, false, r),
        ];
        let mut prev = sw;
        let stages = [0, 1, 2].map(|i| {
            let out = cfg.widths[i];
            let down = Conv::new(&mut s, &format!("stage{i}.down"), prev, out, 3, 2, true, false, r);
            prev = out;
            Stage {
                down,
                blocks: [
                    Bottleneck::new(&mut s, &format!("stage{i}.b0"), out, r),
                    Bottleneck::new(&mut s, &format!("stage{i}.b1"), out, r),
                ],
            }
        });
        let lat5 = Conv::new(&mut s, "neck.lat5", w2, w1, 1, 1, true, false, r);
        let td4 = Conv::new(&mut s, "neck.td4", 2 * w1, w1, 3, 1, true, false, r);
        let lat4 = Conv::new(&mut s, "neck.lat4", w1, w0, 1, 1, true, false, r);
        let td3 = Conv::new(&mut s, "neck.td3", 2 * w0, w0, 3, 1, true, false, r);
        let down3 = Conv::new(&mut s, "neck.down3", w0, w0, 3, 2, true, false, r);
        let bu4 = Conv::new(&mut s, "neck.bu4", 2 * w0, w1, 3, 1, true, false, r);
        let down4 = Conv::new(&mut s, "neck.down4", w1, w1, 3, 2, true, false, r);
        let bu5 = Conv::new(&mut s, "neck.bu5", 2 * w1, w2, 3, 1, true, false, r);

        let mut attention = Vec::new();
        if cfg.cbam_enabled {
            for (i, &c) in cfg.widths.iter().enumerate() {
                attention.push(CbamBlock::new(cfg.cbam_config(c), &mut s, &format!("cbam{i}"), r)?);
            }
        }

        let k = ANCHORS_PER_SCALE * cfg.outputs_per_anchor();
        let heads = [0, 1, 2].map(|i| Conv::new(&mut s, &format!("head{i}"), cfg.widths[i], k, 1, 1, true, false, r));
        for (i, head) in heads.iter().enumerate() {
            let bias = head.bias.expect("heads carry a bias");
            init_head_bias(&mut s.get_mut(bias).value, &cfg, i);
        }

        let mut model = Model {
            cfg,
            params: s,
            stem,
            stages,
            lat5,
            td4,
            lat4,
            td3,
            down3,
            bu4,
            down4,
            bu5,
            attention,
            heads,
        };
        model.calibrate(&mut rng)?;
        let share = model.attention_share();
        if share >= 0.02 {
            log::debug!("attention parameters are {:.2}% of the model", share * 100.0);
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn attention_parameters(&self) -> usize {
        self.params.attention_numel()
    }

    /// Fraction of scalar parameters that belong to attention blocks.
    pub fn attention_share(&self) -> f64 {
        self.attention_parameters() as f64 / self.num_parameters() as f64
    }

    /// Non-attention convs in execution order, paired with the output
    /// standard deviation calibration aims for.
    fn calibration_plan(&self) -> Vec<(ParamId, f64)> {
        let mut convs: Vec<&Conv> = self.stem.iter().collect();
        for stage in &self.stages {
            convs.push(&stage.down);
            for b in &stage.blocks {
                convs.extend([&b.reduce, &b.expand]);
            }
        }
        convs.extend([
            &self.lat5,
            &self.td4,
            &self.lat4,
            &self.td3,
            &self.down3,
            &self.bu4,
            &self.down4,
            &self.bu5,
        ]);
        let mut plan: Vec<(ParamId, f64)> = convs.into_iter().map(|c| (c.weight, 1.0)).collect();
        plan.extend(self.heads.iter().map(|h| (h.weight, HEAD_OUTPUT_STD)));
        plan
    }

    /// Rescales each conv, in execution order, so its pre-activation output
    /// on a seeded noise image has a fixed standard deviation. Without
    /// normalisation layers, fan-in init alone leaves this SiLU stack
    /// vanishing or exploding depending on the seed.
    fn calibrate(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let s = self.cfg.input_size;
        let probe = Tensor::new(vec![1, 3, s, s], (0..3 * s * s).map(|_| rng.gen::<f64>()).collect())?;
        for (id, target) in self.calibration_plan() {
            let mut g = Graph::new();
            let vars = self.params.register(&mut g, false);
            let x = g.constant(probe.clone());
            self.forward(&mut g, &vars, x, GateMode::Active)?;
            let out = g.value(g.conv_output(vars[id.0]).expect("every planned conv runs"));
            let n = out.numel() as f64;
            let mean = out.data().iter().sum::<f64>() / n;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                let k = target / var.sqrt();
                for w in self.params.get_mut(id).value.data_mut() {
                    *w *= k;
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        match shape {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "detector input",
                left: shape.to_vec(),
                right: vec![shape.first().copied().unwrap_or(1), 3, s, s],
            }),
        }
    }

    fn attend(&self, g: &mut Graph, vars: &[Var], i: usize, x: Var, mode: GateMode) -> Result<Var> {
        match self.attention.get(i) {
            Some(block) => block.forward(g, vars, x, mode),
            None => Ok(x),
        }
    }

    /// Runs the network on `images` (`[B,3,S,S]`) recorded on `g`; `vars`
    /// come from `self.params.register(g, ..)`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var, mode: GateMode) -> Result<RawPredictions> {
        self.check_input(g.shape(images))?;
        let in_backbone = self.cfg.cbam_placement == CbamPlacement::Backbone;
        let mut x = images;
        for conv in &self.stem {
            x = conv_silu(conv, g, vars, x)?;
        }
        let mut feats = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = conv_silu(&stage.down, g, vars, x)?;
            for b in &stage.blocks {
                x = b.forward(g, vars, x)?;
            }
            if in_backbone {
                x = self.attend(g, vars, i, x, mode)?;
            }
            feats.push(x);
        }
        let (p3, p4, p5) = (feats[0], feats[1], feats[2]);

        let l5 = conv_silu(&self.lat5, g, vars, p5)?;
        let up = g.upsample_nearest_2x(l5)?;
        let cat = g.concat(&[up, p4], 1)?;
        let t4 = conv_silu(&self.td4, g, vars, cat)?;
        let l4 = conv_silu(&self.lat4, g, vars, t4)?;
        let up = g.upsample_nearest_2x(l4)?;
        let cat = g.concat(&[up, p3], 1)?;
        let mut out3 = conv_silu(&self.td3, g, vars, cat)?;

        let d = conv_silu(&self.down3, g, vars, out3)?;
        let cat = g.concat(&[d, l4], 1)?;
        let mut out4 = conv_silu(&self.bu4, g, vars, cat)?;
        let d = conv_silu(&self.down4, g, vars, out4)?;
        let cat = g.concat(&[d, l5], 1)?;
        let mut out5 = conv_silu(&self.bu5, g, vars, cat)?;

        if !in_backbone {
            out3 = self.attend(g, vars, 0, out3, mode)?;
            out4 = self.attend(g, vars, 1, out4, mode)?;
            out5 = self.attend(g, vars, 2, out5, mode)?;
        }

        let k = self.cfg.outputs_per_anchor();
        let mut scales = [images; NUM_SCALES];
        for (i, feat) in [out3, out4, out5].into_iter().enumerate() {
            let raw = self.heads[i].forward(g, vars, feat)?;
            let [b, _, h, w] = g.shape(raw).try_into().expect("rank 4");
            let r = g.reshape(raw, &[b, ANCHORS_PER_SCALE, k, h, w])?;
            scales[i] = g.permute(r, &[0, 1, 3, 4, 2])?;
        }
        Ok(RawPredictions { scales })
    }

    /// Inference without gradient tracking; returns one tensor per scale.
    pub fn predict(&self, images: &Tensor) -> Result<[Tensor; NUM_SCALES]> {
        self.predict_with(images, GateMode::Active)
    }

    pub fn predict_with(&self, images: &Tensor, mode: GateMode) -> Result<[Tensor; NUM_SCALES]> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let x = g.constant(images.clone());
        let preds = self.forward(&mut g, &vars, x, mode)?;
        Ok(preds.scales.map(|v| g.value(v).clone()))
    }

    pub fn head_biases(&self) -> [&Tensor; NUM_SCALES] {
        self.heads
            .each_ref()
            .map(|h| &self.params.get(h.bias.expect("head bias")).value)
    }
}

/// Initial spread of raw head outputs around the head biases.
const HEAD_OUTPUT_STD: f64 = 0.1;

/// Objectness starts near the prior of a few objects per image; class
/// logits start slightly positive.
fn init_head_bias(bias: &mut Tensor, cfg: &ModelConfig, scale: usize) {
    let k = cfg.outputs_per_anchor();
    let cells = (cfg.input_size / STRIDES[scale]).pow(2) as f64;
    let obj = (8.0 / cells).min(0.5).ln();
    let cls = (0.6 / (cfg.num_classes as f64 - 0.99)).ln();
    for a in 0..ANCHORS_PER_SCALE {
        let row = &mut bias.data_mut()[a * k..(a + 1) * k];
        row[4] = obj;
        row[5..].iter_mut().for_each(|v| *v = cls);
    }
}
