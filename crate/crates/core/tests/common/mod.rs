//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use cbam_detect::cbam::{CbamBlock, CbamConfig, GateMode};
use cbam_detect::detector::{ModelConfig, STRIDES};
use cbam_detect::loss::{build_targets, detection_loss_on_graph, Annotation, LossWeights};
use cbam_detect::nn::{ParamKind, ParamStore};
use cbam_detect::postprocess::Detection;
use cbam_detect::tensor::{Graph, Tensor, Var};
use cbam_detect::{Model, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Worst finite-difference disagreement found by [`grad_check`].
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Checks reverse-mode gradients of `f` against central differences.
///
/// `f` maps input vars to an output of any shape; the scalar under test is
/// `sum(out * weights)` with fixed random weights, so every output element
/// contributes. `pick(i, n)` selects which elements of input `i` to probe.
pub fn grad_check<F>(
    inputs: &[Tensor],
    f: F,
    rng: &mut ChaCha8Rng,
    pick: impl Fn(usize, usize) -> Vec<usize>,
) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| Tensor::ones(g.shape(out)));
        let wv = g.constant(w.clone());
        let prod = g.mul_broadcast(out, wv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item().unwrap();
        g.backward(loss).unwrap();
        (value, w, vars.iter().map(|v| g.grad(*v)).collect())
    };
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = random_tensor(&shape, rng, -1.0, 1.0);
    let (_, _, grads) = eval(inputs, Some(&weights));

    let mut report = GradCheck {
        checked: 0,
        failures: Vec::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in pick(i, input.numel()) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * FD_STEP);
            let an = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            report.checked += 1;
            if (fd - an).abs() > ATOL + RTOL * fd.abs() {
                report
                    .failures
                    .push(format!("input {i} element {j}: analytic {an:e}, numeric {fd:e}"));
            }
        }
    }
    report
}

pub fn all_elements(_: usize, n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the most confident survivor (lowest index on ties) and
/// strikes every same-class box overlapping it by more than `thr`.
pub fn nms_brute(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].confidence > dets[b].confidence) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(dets[b]);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class_id == dets[b].class_id
                && corner_iou(dets[i].bbox.to_corner().coords, dets[b].bbox.to_corner().coords) > thr
            {
                alive[i] = false;
            }
        }
    }
    keep
}

/// AP as the sum, over true positives in rank order, of `1/num_gt` times
/// the best precision reached at that rank or later.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<[f64; 4]>], thr: f64) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            ranked.push((d.confidence, img, k));
        }
    }
    if num_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for &(_, img, k) in &ranked {
        let bx = dets[img][k].bbox.to_corner().coords;
        let mut best = None;
        let mut best_iou = thr;
        for (gi, g) in gts[img].iter().enumerate() {
            let v = corner_iou(bx, *g);
            if !used[img][gi] && v >= best_iou && (best.is_none() || v > best_iou) {
                best = Some(gi);
                best_iou = v;
            }
        }
        if let Some(gi) = best {
            used[img][gi] = true;
        }
        hits.push(best.is_some());
    }
    let mut precision = Vec::new();
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut ap = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            let best_later = precision[i..].iter().cloned().fold(0.0, f64::max);
            ap += best_later / num_gt as f64;
        }
    }
    ap
}

/// Every (image, annotation, scale, anchor, row, column, target) the
/// assignment rule admits, found by scanning all cells of all grids.
pub type AssignKey = (usize, usize, usize, usize, usize, usize, [u64; 4]);

pub fn assign_oracle(annotations: &[Vec<Annotation>], cfg: &ModelConfig) -> Vec<AssignKey> {
    let s = cfg.input_size as f64;
    let anchors = cfg.anchors();
    let mut out = Vec::new();
    for (img, anns) in annotations.iter().enumerate() {
        for (ai, ann) in anns.iter().enumerate() {
            let [cx, cy, w, h] = ann.cxcywh();
            for (scale, &stride) in STRIDES.iter().enumerate() {
                let size = cfg.input_size / stride;
                let stride = stride as f64;
                let (gx, gy) = (cx * s / stride, cy * s / stride);
                let home_x = (gx.floor() as usize).min(size - 1);
                let home_y = (gy.floor() as usize).min(size - 1);
                let (fx, fy) = (gx - home_x as f64, gy - home_y as f64);
                for (anchor, a) in anchors[scale].iter().enumerate() {
                    let ratios = [w * s / a[0], a[0] / (w * s), h * s / a[1], a[1] / (h * s)];
                    if ratios.iter().any(|&r| r >= 4.0) {
                        continue;
                    }
                    for y in 0..size {
                        for x in 0..size {
                            let dx = x as i64 - home_x as i64;
                            let dy = y as i64 - home_y as i64;
                            let ok = match (dx, dy) {
                                (0, 0) => true,
                                (-1, 0) => fx < 0.5,
                                (1, 0) => fx > 0.5,
                                (0, -1) => fy < 0.5,
                                (0, 1) => fy > 0.5,
                                _ => false,
                            };
                            if ok {
                                let t = [gx - x as f64, gy - y as f64, w * s / stride, h * s / stride];
                                out.push((img, ai, scale, anchor, y, x, t.map(f64::to_bits)));
                            }
                        }
                    }
                }
            }
        }
    }
    out.sort();
    out
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        widths: [4, 8, 16],
        ..Default::default()
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable op under test with fixed random inputs.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(
    name: impl Into<String>,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name: name.into(),
        inputs,
        f: Box::new(f),
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed), -1.0, 1.0)
}

/// Every differentiable graph op, including the CBAM block as a whole.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = Vec::new();
    for (stride, padding, bias) in [(1, 1, true), (2, 1, false), (1, 0, true), (2, 0, true)] {
        let inputs = vec![rand_t(&[2, 3, 5, 5], 1), rand_t(&[4, 3, 3, 3], 2), rand_t(&[4], 3)];
        cases.push(case(format!("conv2d s{stride} p{padding}"), inputs, move |g, v| {
            g.conv2d(v[0], v[1], bias.then_some(v[2]), stride, padding)
        }));
    }
    cases.push(case(
        "conv2d 1x1",
        vec![rand_t(&[1, 2, 6, 6], 4), rand_t(&[3, 2, 1, 1], 5)],
        |g, v| g.conv2d(v[0], v[1], None, 1, 0),
    ));
    let a = rand_t(&[2, 3, 4, 4], 6);
    cases.push(case("add", vec![a.clone(), rand_t(&[2, 3, 4, 4], 7)], |g, v| {
        g.add(v[0], v[1])
    }));
    cases.push(case("mul", vec![a.clone(), rand_t(&[2, 3, 4, 4], 8)], |g, v| {
        g.mul_broadcast(v[0], v[1])
    }));
    cases.push(case(
        "mul per channel",
        vec![a.clone(), rand_t(&[2, 3, 1, 1], 9)],
        |g, v| g.mul_broadcast(v[0], v[1]),
    ));
    cases.push(case(
        "mul per pixel",
        vec![a.clone(), rand_t(&[2, 1, 4, 4], 10)],
        |g, v| g.mul_broadcast(v[0], v[1]),
    ));
    cases.push(case("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -2.5))));
    cases.push(case("sigmoid", vec![a.clone()], |g, v| Ok(g.sigmoid(v[0]))));
    cases.push(case("silu", vec![a.clone()], |g, v| Ok(g.silu(v[0]))));
    cases.push(case("relu", vec![a.clone()], |g, v| Ok(g.relu(v[0]))));
    let p = rand_t(&[2, 3, 6, 6], 11);
    cases.push(case("max_pool2d 2/2", vec![p.clone()], |g, v| g.max_pool2d(v[0], 2, 2)));
    cases.push(case("max_pool2d 3/1", vec![p.clone()], |g, v| g.max_pool2d(v[0], 3, 1)));
    cases.push(case("global_avg_pool", vec![p.clone()], |g, v| g.global_avg_pool(v[0])));
    cases.push(case("global_max_pool", vec![p.clone()], |g, v| g.global_max_pool(v[0])));
    cases.push(case("channel_mean", vec![p.clone()], |g, v| g.channel_mean(v[0])));
    cases.push(case("channel_max", vec![p], |g, v| g.channel_max(v[0])));
    cases.push(case("concat", vec![a.clone(), rand_t(&[2, 2, 4, 4], 12)], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    }));
    cases.push(case("upsample_nearest_2x", vec![a.clone()], |g, v| {
        g.upsample_nearest_2x(v[0])
    }));
    cases.push(case("reshape+permute", vec![a.clone()], |g, v| {
        let r = g.reshape(v[0], &[2, 3, 2, 8])?;
        g.permute(r, &[0, 2, 3, 1])
    }));
    cases.push(case("sum", vec![a.clone()], |g, v| Ok(g.sum(v[0]))));
    cases.push(case("mean", vec![a], |g, v| Ok(g.mean(v[0]))));
    // f(a, b) = Σ a² + Σ sin(b) attached with hand-written local gradients
    cases.push(case(
        "external_scalar",
        vec![rand_t(&[3, 2], 13), rand_t(&[4], 14)],
        |g, v| {
            let (va, vb) = (g.value(v[0]).clone(), g.value(v[1]).clone());
            let value = va.data().iter().map(|x| x * x).sum::<f64>() + vb.data().iter().map(|x| x.sin()).sum::<f64>();
            let ga = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| 2.0 * x).collect())?;
            let gb = Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|x| x.cos()).collect())?;
            let s = g.external_scalar(&[v[0], v[1]], value, vec![ga, gb])?;
            let t = g.sigmoid(v[0]);
            let t = g.sum(t);
            g.add(s, t)
        },
    ));
    let mut store = ParamStore::new();
    let block = CbamBlock::new(
        CbamConfig::new(8),
        &mut store,
        "cbam",
        &mut ChaCha8Rng::seed_from_u64(15),
    )
    .unwrap();
    let mut inputs = vec![rand_t(&[2, 8, 5, 5], 16)];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    cases.push(case("cbam block", inputs, move |g, v| {
        block.forward(g, &v[1..], v[0], GateMode::Active)
    }));
    cases
}

pub fn check_op(c: &OpCase, seed: u64) -> GradCheck {
    grad_check(&c.inputs, &c.f, &mut ChaCha8Rng::seed_from_u64(seed), all_elements)
}

/// Full toy model plus detection loss, probing 1% of every parameter tensor.
pub fn toy_model_check() -> GradCheck {
    let cfg = toy_model_config();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let images = random_tensor(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(19), 0.0, 1.0);
    let anns = vec![
        vec![Annotation::new(0, 0.4, 0.5, 0.3, 0.2)],
        vec![
            Annotation::new(0, 0.7, 0.3, 0.15, 0.25),
            Annotation::new(0, 0.2, 0.8, 0.4, 0.3),
        ],
    ];
    let targets = build_targets(&anns, &cfg);
    assert!(!targets.entries.is_empty());
    let weights = LossWeights::default();
    let inputs: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(20);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| sample(&mut pick_rng, t.numel(), t.numel().div_ceil(100)).into_vec())
        .collect();
    grad_check(
        &inputs,
        |g, v| {
            let x = g.constant(images.clone());
            let preds = model.forward(g, v, x, GateMode::Active)?;
            Ok(detection_loss_on_graph(g, &preds, &targets, &cfg, &weights)?.0)
        },
        &mut ChaCha8Rng::seed_from_u64(21),
        |i, _| picks[i].clone(),
    )
}

/// One randomized CBAM block checked for shape preservation, gates strictly
/// inside (0,1) and `|out| <= |in|`; returns the first violation.
pub fn cbam_trial(seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, h, w) = (
        rng.gen_range(1..3),
        rng.gen_range(1..17),
        rng.gen_range(1..9),
        rng.gen_range(1..9),
    );
    let mut cfg = CbamConfig::new(c);
    cfg.mlp_bias = rng.gen_bool(0.5);
    let mut store = ParamStore::new();
    let block = CbamBlock::new(cfg, &mut store, "cbam", &mut rng).map_err(|e| e.to_string())?;
    // fresh init redrawn at a random gain; much larger weights push logits
    // past ~37, where an f64 sigmoid rounds to exactly 1
    let gain = rng.gen_range(0.1..1.5);
    for p in store.iter_mut() {
        let bias = p.kind == ParamKind::Bias;
        for v in p.value.data_mut() {
            *v = if bias {
                gain * rng.gen_range(-1.0..1.0)
            } else {
                *v * gain * rng.gen_range(-1.0..1.0)
            };
        }
    }
    let x = random_tensor(&[b, c, h, w], &mut rng, -2.0, 2.0);
    let mut g = Graph::new();
    let vars = store.register(&mut g, false);
    let xv = g.constant(x.clone());
    let (out, maps) = block.forward_with_maps(&mut g, &vars, xv).map_err(|e| e.to_string())?;
    if g.shape(out) != x.shape() {
        return Err(format!("shape {:?} became {:?}", x.shape(), g.shape(out)));
    }
    for (name, m) in [("channel", maps.channel_map), ("spatial", maps.spatial_map)] {
        if let Some(v) = g.value(m).data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(format!("{name} map value {v} outside (0,1)"));
        }
    }
    for (o, i) in g.value(out).data().iter().zip(x.data()) {
        if o.abs() > i.abs() {
            return Err(format!("|{o}| > |{i}|"));
        }
    }
    Ok(())
}

/// Zeroed block on a random input; returns the largest deviation from `0.25·x`.
pub fn cbam_zero_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.gen_range(1..17), rng.gen_range(1..9), rng.gen_range(1..9));
    let mut store = ParamStore::new();
    let block = CbamBlock::new(CbamConfig::new(c), &mut store, "cbam", &mut rng).unwrap();
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let x = random_tensor(&[2, c, h, w], &mut rng, -10.0, 10.0);
    let mut g = Graph::new();
    let vars = store.register(&mut g, false);
    let xv = g.constant(x.clone());
    let out = block.forward(&mut g, &vars, xv, GateMode::Active).unwrap();
    g.value(out)
        .data()
        .iter()
        .zip(x.data())
        .map(|(o, i)| (o - 0.25 * i).abs())
        .fold(0.0, f64::max)
}

pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, classes: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
            let (w, h) = (rng.gen_range(1.0..extent / 2.0), rng.gen_range(1.0..extent / 2.0));
            // coarse confidences so ties occur
            let conf = (rng.gen_range(0.0..1.0f64) * 50.0).round() / 50.0;
            Detection::new(rng.gen_range(0..classes), x, y, x + w, y + h, conf)
        })
        .collect()
}

/// Per-image detections and ground-truth corners for one AP instance.
pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<[f64; 4]>>) {
    let images = rng.gen_range(1..6);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let (ng, nd) = (rng.gen_range(0..5), rng.gen_range(0..6));
        let g: Vec<[f64; 4]> = random_detections(rng, ng, 1, 40.0)
            .into_iter()
            .map(|d| d.bbox.coords)
            .collect();
        let mut d = random_detections(rng, nd, 1, 40.0);
        // jittered copies of the truth so hits are common
        for b in &g {
            if rng.gen_bool(0.7) {
                let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.gen_range(-2.0..2.0);
                let (x1, y1) = (j(b[0], rng), j(b[1], rng));
                let (x2, y2) = (j(b[2], rng).max(x1 + 0.5), j(b[3], rng).max(y1 + 0.5));
                d.push(Detection::new(0, x1, y1, x2, y2, rng.gen_range(0.0..1.0)));
            }
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

pub fn random_annotations(rng: &mut ChaCha8Rng) -> Vec<Vec<Annotation>> {
    (0..rng.gen_range(1..4))
        .map(|_| {
            (0..rng.gen_range(0..5))
                .map(|_| {
                    Annotation::new(
                        0,
                        rng.gen_range(0.0..=1.0),
                        rng.gen_range(0.0..=1.0),
                        rng.gen_range(0.002..0.9),
                        rng.gen_range(0.002..0.9),
                    )
                })
                .collect()
        })
        .collect()
}
