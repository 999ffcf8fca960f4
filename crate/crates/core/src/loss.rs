//! Target assignment and the composite detection loss.
//!
//! Box regression uses CIoU in grid units of the assigned scale; objectness
//! and class terms are binary cross-entropy on logits. The loss is evaluated
//! outside the tape and attached to it as a single scalar with exact
//! gradients for every prediction entry.

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Units};
use crate::detector::{ModelConfig, RawPredictions, ANCHORS_PER_SCALE, NUM_SCALES, STRIDES};
use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// Anchor-to-box side ratio must stay below this in both dimensions.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// Ground-truth object: class plus a normalized center-form box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

impl Annotation {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Annotation {
            class_id,
            bbox: BBox::center(cx, cy, w, h, Units::Normalized),
        }
    }

    /// `(cx, cy, w, h)` normalized.
    pub fn cxcywh(&self) -> [f64; 4] {
        self.bbox.to_center().to_normalized(1.0).coords
    }
}

/// CIoU of two center-form boxes `(cx, cy, w, h)`, generic so the same
/// expression yields values (`f64`) or exact derivatives ([`Dual`]).
pub fn ciou_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let half = T::cst(0.5);
    let [acx, acy, aw, ah] = a;
    let [bcx, bcy, bw, bh] = b;
    let (ax1, ax2, ay1, ay2) = (acx - aw * half, acx + aw * half, acy - ah * half, acy + ah * half);
    let (bx1, bx2, by1, by2) = (bcx - bw * half, bcx + bw * half, bcy - bh * half, bcy + bh * half);
    let zero = T::cst(0.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    let iou = inter / union;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let (dx, dy) = (bcx - acx, bcy - acy);
    let rho2 = dx * dx + dy * dy;
    let dtheta = (bw / bh).atan() - (aw / ah).atan();
    let v = T::cst(4.0 / (std::f64::consts::PI * std::f64::consts::PI)) * dtheta * dtheta;
    let aspect = if v.val() == 0.0 {
        zero
    } else {
        // summing in this order keeps a tiny v from vanishing against 1
        let alpha = v / ((T::cst(1.0) - iou).max(zero) + v);
        alpha * v
    };
    iou - rho2 / c2 - aspect
}

/// Complete IoU between two boxes in the same units. Lies in `(-1.5, 1]`
/// and equals 1 only for identical boxes.
pub fn ciou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.units != b.units {
        return Err(Error::invalid("ciou", "boxes are in different units"));
    }
    let (a, b) = (a.to_center(), b.to_center());
    for bx in [&a, &b] {
        if !(bx.coords[2] > 0.0 && bx.coords[3] > 0.0) {
            return Err(Error::DegenerateBox(bx.coords));
        }
    }
    Ok(ciou_generic(a.coords, b.coords))
}

/// One (annotation, scale, anchor, cell) training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub annotation: usize,
    pub class_id: usize,
    pub scale: usize,
    pub anchor: usize,
    pub grid_y: usize,
    pub grid_x: usize,
    /// Target `(x, y)` relative to the cell corner and `(w, h)`, grid units.
    pub target: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetAssignment {
    pub entries: Vec<Assignment>,
    /// Annotations that no anchor at any scale accepted.
    pub unmatched: usize,
}

/// Anchor-ratio test in pixels.
pub fn anchor_accepts(box_wh: [f64; 2], anchor_wh: [f64; 2]) -> bool {
    let rw = box_wh[0] / anchor_wh[0];
    let rh = box_wh[1] / anchor_wh[1];
    rw.max(1.0 / rw).max(rh).max(1.0 / rh) < ANCHOR_RATIO_LIMIT
}

/// Cells responsible for a center at grid coordinate `(gx, gy)` on a
/// `size×size` grid: the containing cell, plus the horizontal and vertical
/// neighbour lying on the side of the cell the center leans towards.
pub fn responsible_cells(gx: f64, gy: f64, size: usize) -> Vec<(usize, usize)> {
    let cx = (gx.floor() as usize).min(size - 1);
    let cy = (gy.floor() as usize).min(size - 1);
    let (fx, fy) = (gx - cx as f64, gy - cy as f64);
    let mut cells = vec![(cy, cx)];
    if fx < 0.5 && cx >= 1 {
        cells.push((cy, cx - 1));
    } else if fx > 0.5 && cx + 1 < size {
        cells.push((cy, cx + 1));
    }
    if fy < 0.5 && cy >= 1 {
        cells.push((cy - 1, cx));
    } else if fy > 0.5 && cy + 1 < size {
        cells.push((cy + 1, cx));
    }
    cells
}

/// Assigns every annotation of every image to anchors and cells.
pub fn build_targets(annotations: &[Vec<Annotation>], cfg: &ModelConfig) -> TargetAssignment {
    let anchors = cfg.anchors();
    let s = cfg.input_size as f64;
    let mut out = TargetAssignment::default();
    for (image, anns) in annotations.iter().enumerate() {
        for (ai, ann) in anns.iter().enumerate() {
            let [cx, cy, w, h] = ann.cxcywh();
            let before = out.entries.len();
            for (scale, &stride) in STRIDES.iter().enumerate() {
                let size = cfg.grid_size(scale);
                let stride = stride as f64;
                let (gx, gy) = (cx * s / stride, cy * s / stride);
                let (gw, gh) = (w * s / stride, h * s / stride);
                for (anchor, wh) in anchors[scale].iter().enumerate() {
                    if !anchor_accepts([w * s, h * s], *wh) {
                        continue;
                    }
                    for (grid_y, grid_x) in responsible_cells(gx, gy, size) {
                        out.entries.push(Assignment {
                            image,
                            annotation: ai,
                            class_id: ann.class_id,
                            scale,
                            anchor,
                            grid_y,
                            grid_x,
                            target: [gx - grid_x as f64, gy - grid_y as f64, gw, gh],
                        });
                    }
                }
            }
            if out.entries.len() == before {
                out.unmatched += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Use the detached CIoU (clamped to [0,1]) as objectness target instead of 1.
    pub soft_objectness: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            soft_objectness: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// Unweighted mean of `1 - CIoU` over assignments.
    pub box_loss: f64,
    /// Unweighted mean objectness BCE over every anchor slot.
    pub obj_loss: f64,
    /// Unweighted mean class BCE over assignments and classes.
    pub cls_loss: f64,
}

/// Loss value plus its gradient with respect to each scale's predictions.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub components: LossComponents,
    pub grads: Vec<Tensor>,
}

/// Stable `BCE(σ(z), t)` and its derivative in `z`.
pub fn bce_with_logits(z: f64, t: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - t)
}

/// Decoded prediction box `(x, y, w, h)` in grid units relative to the cell
/// corner, from raw `(tx, ty, tw, th)`.
pub fn decode_cell_box<T: Real>(t: [T; 4], anchor_grid: [f64; 2]) -> [T; 4] {
    let two = T::cst(2.0);
    let [tx, ty, tw, th] = t;
    let sw = two * tw.sigmoid();
    let sh = two * th.sigmoid();
    [
        two * tx.sigmoid() - T::cst(0.5),
        two * ty.sigmoid() - T::cst(0.5),
        sw * sw * T::cst(anchor_grid[0]),
        sh * sh * T::cst(anchor_grid[1]),
    ]
}

fn check_pred_shapes(preds: &[&Tensor], cfg: &ModelConfig) -> Result<usize> {
    if preds.len() != NUM_SCALES {
        return Err(Error::invalid(
            "detection_loss",
            format!("expected {NUM_SCALES} scales, got {}", preds.len()),
        ));
    }
    let batch = preds[0].shape()[0];
    for (s, p) in preds.iter().enumerate() {
        let g = cfg.grid_size(s);
        let want = [batch, ANCHORS_PER_SCALE, g, g, cfg.outputs_per_anchor()];
        if p.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "detection_loss",
                left: p.shape().to_vec(),
                right: want.to_vec(),
            });
        }
    }
    Ok(batch)
}

/// Offset of `(b, a, y, x, 0)` in a `[B, A, G, G, K]` prediction tensor.
pub fn pred_offset(shape: &[usize], b: usize, a: usize, y: usize, x: usize) -> usize {
    let (na, g, k) = (shape[1], shape[2], shape[4]);
    (((b * na + a) * g + y) * g + x) * k
}

/// Composite loss and its exact gradient.
pub fn detection_loss(
    preds: &[&Tensor],
    targets: &TargetAssignment,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossOutput> {
    check_pred_shapes(preds, cfg)?;
    let anchors = cfg.anchors();
    let nc = cfg.num_classes;
    let mut grads: Vec<Tensor> = preds.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut obj_target: Vec<Vec<f64>> = preds.iter().map(|p| vec![0.0; p.numel() / p.shape()[4]]).collect();

    let n_assigned = targets.entries.len();
    let mut box_sum = 0.0;
    let mut cls_sum = 0.0;
    for e in &targets.entries {
        let p = preds[e.scale];
        if e.class_id >= nc {
            return Err(Error::invalid(
                "detection_loss",
                format!("class {} out of range", e.class_id),
            ));
        }
        let off = pred_offset(p.shape(), e.image, e.anchor, e.grid_y, e.grid_x);
        let raw = &p.data()[off..off + 5 + nc];
        let stride = STRIDES[e.scale] as f64;
        let [aw, ah] = anchors[e.scale][e.anchor];
        let t: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(raw[i], i));
        let pbox = decode_cell_box(t, [aw / stride, ah / stride]);
        let c = ciou_generic(pbox, e.target.map(Dual::cst));
        box_sum += 1.0 - c.v;
        let scale = weights.box_weight / n_assigned as f64;
        let g = grads[e.scale].data_mut();
        for i in 0..4 {
            g[off + i] -= scale * c.d[i];
        }
        let cell = off / p.shape()[4];
        let objective = if weights.soft_objectness {
            c.v.clamp(0.0, 1.0)
        } else {
            1.0
        };
        obj_target[e.scale][cell] = obj_target[e.scale][cell].max(objective);

        for k in 0..nc {
            let tgt = if k == e.class_id { 1.0 } else { 0.0 };
            let (l, d) = bce_with_logits(raw[5 + k], tgt);
            cls_sum += l;
            g[off + 5 + k] += weights.cls_weight * d / (n_assigned * nc) as f64;
        }
    }

    let n_slots: usize = obj_target.iter().map(Vec::len).sum();
    let mut obj_sum = 0.0;
    for (s, p) in preds.iter().enumerate() {
        let k = p.shape()[4];
        let g = grads[s].data_mut();
        for (cell, &t) in obj_target[s].iter().enumerate() {
            let (l, d) = bce_with_logits(p.data()[cell * k + 4], t);
            obj_sum += l;
            g[cell * k + 4] += weights.obj_weight * d / n_slots as f64;
        }
    }

    let (box_loss, cls_loss) = if n_assigned == 0 {
        (0.0, 0.0)
    } else {
        (box_sum / n_assigned as f64, cls_sum / (n_assigned * nc) as f64)
    };
    let obj_loss = obj_sum / n_slots as f64;
    let total = weights.box_weight * box_loss + weights.obj_weight * obj_loss + weights.cls_weight * cls_loss;
    Ok(LossOutput {
        components: LossComponents {
            total,
            box_loss,
            obj_loss,
            cls_loss,
        },
        grads,
    })
}

/// Attaches the detection loss to `g` as a differentiable scalar.
pub fn detection_loss_on_graph(
    g: &mut Graph,
    preds: &RawPredictions,
    targets: &TargetAssignment,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let values: Vec<&Tensor> = preds.scales.iter().map(|v| g.value(*v)).collect();
    let out = detection_loss(&values, targets, cfg, weights)?;
    let var = g.external_scalar(&preds.scales, out.components.total, out.grads)?;
    Ok((var, out.components))
}
