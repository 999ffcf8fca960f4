//! Prediction decoding and per-class non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox, Units};
use crate::detector::{ModelConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::loss::{decode_cell_box, pred_offset};
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_IOU_THRESH: f64 = 0.45;

/// A predicted object: corner-form pixel box with `obj · class` confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Self {
        Detection {
            class_id,
            bbox: BBox::corner(x1, y1, x2, y2, Units::Pixels),
            confidence,
        }
    }
}

/// Decodes one image of raw predictions (batch index `image`) into
/// detections with confidence ≥ `conf_thresh`, in scale/anchor/row/column
/// order. Each anchor slot reports its best class.
pub fn decode(preds: &[Tensor], image: usize, cfg: &ModelConfig, conf_thresh: f64) -> Vec<Detection> {
    let anchors = cfg.anchors();
    let limit = cfg.input_size as f64;
    let nc = cfg.num_classes;
    let mut out = Vec::new();
    for (s, p) in preds.iter().enumerate() {
        let shape = p.shape();
        let g = shape[2];
        let stride = STRIDES[s] as f64;
        for (a, &[aw, ah]) in anchors[s].iter().enumerate().take(ANCHORS_PER_SCALE) {
            for y in 0..g {
                for x in 0..g {
                    let off = pred_offset(shape, image, a, y, x);
                    let raw = &p.data()[off..off + 5 + nc];
                    let obj = sigmoid(raw[4]);
                    // cheap reject: class probability is at most 1
                    if obj < conf_thresh {
                        continue;
                    }
                    let (class_id, cls) = raw[5..]
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |best, (k, &z)| if z > best.1 { (k, z) } else { best },
                        );
                    let confidence = obj * sigmoid(cls);
                    if confidence < conf_thresh {
                        continue;
                    }
                    let [bx, by, bw, bh] =
                        decode_cell_box([raw[0], raw[1], raw[2], raw[3]], [aw / stride, ah / stride]);
                    let cx = (bx + x as f64) * stride;
                    let cy = (by + y as f64) * stride;
                    let (w, h) = (bw * stride, bh * stride);
                    let bbox = BBox::center(cx, cy, w, h, Units::Pixels).to_corner().clamp(limit);
                    out.push(Detection {
                        class_id,
                        bbox,
                        confidence,
                    });
                }
            }
        }
    }
    out
}

/// Greedy per-class NMS. Output is sorted by confidence (descending, ties by
/// original index) and never holds two same-class boxes with IoU above
/// `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Decode followed by NMS, for one image.
pub fn postprocess(
    preds: &[Tensor],
    image: usize,
    cfg: &ModelConfig,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Vec<Detection> {
    nms(&decode(preds, image, cfg, conf_thresh), iou_thresh)
}

/// Inverse of the box decode for one cell and anchor: raw `(tx, ty, tw, th)`
/// reproducing a center-form pixel box. `None` when the box lies outside
/// what the parameterisation can represent.
pub fn encode_box(bbox: &BBox, cell: (usize, usize), anchor: [f64; 2], stride: f64) -> Option<[f64; 4]> {
    let [cx, cy, w, h] = bbox.to_center().coords;
    let logit = |p: f64| (p > 0.0 && p < 1.0).then(|| (p / (1.0 - p)).ln());
    let (y, x) = cell;
    let ox = cx / stride - x as f64;
    let oy = cy / stride - y as f64;
    let tx = logit((ox + 0.5) / 2.0)?;
    let ty = logit((oy + 0.5) / 2.0)?;
    let tw = logit((w / anchor[0]).sqrt() / 2.0)?;
    let th = logit((h / anchor[1]).sqrt() / 2.0)?;
    Some([tx, ty, tw, th])
}
