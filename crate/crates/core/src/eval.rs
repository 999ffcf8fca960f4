//! Detection metrics: greedy IoU matching, all-point interpolated AP,
//! mAP@0.5 and mAP@0.5:0.95.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::dataio::Sample;
use crate::detector::Model;
use crate::error::{Error, Result};
use crate::par;
use crate::postprocess::{postprocess, Detection};
use crate::tensor::Tensor;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Ground-truth box in pixel corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Matching outcome for one class at one IoU threshold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
    /// `(recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64)>,
    /// `(image, detection index, matched gt index)` for every true positive.
    pub matches: Vec<(usize, usize, usize)>,
}

/// Area under the monotone precision envelope of a ranked PR sequence.
pub fn envelope_area(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for ((recall, _), p) in curve.iter().zip(envelope) {
        area += (recall - prev_recall) * p;
        prev_recall = *recall;
    }
    area
}

/// Single-class AP. Detections across all images are ranked by confidence
/// (ties: image index, then detection index); each is matched to the
/// unmatched ground truth of its image with the highest IoU ≥ `iou_thresh`.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> ApResult {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| (0..d.len()).map(move |k| (img, k)))
        .collect();
    ranked.sort_by(|a, b| {
        dets[b.0][b.1]
            .confidence
            .total_cmp(&dets[a.0][a.1].confidence)
            .then(a.cmp(b))
    });

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut result = ApResult {
        num_gt,
        ..Default::default()
    };
    for (img, k) in ranked {
        let det = &dets[img][k];
        let empty = Vec::new();
        let candidates = gts.get(img).unwrap_or(&empty);
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in candidates.iter().enumerate() {
            if taken[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[img][gi] = true;
                result.true_positives += 1;
                result.matches.push((img, k, gi));
            }
            None => result.false_positives += 1,
        }
        if num_gt > 0 {
            let tp = result.true_positives as f64;
            let seen = (result.true_positives + result.false_positives) as f64;
            result.curve.push((tp / num_gt as f64, tp / seen));
        }
    }
    result.ap = match (num_gt, result.true_positives + result.false_positives) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => envelope_area(&result.curve),
    };
    result
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `per_class_ap[class][threshold index]`
    pub per_class_ap: Vec<Vec<f64>>,
    pub map50: f64,
    pub map50_95: f64,
    /// `(recall, precision)` of the IoU-0.5 envelope at 101 recall levels,
    /// averaged over evaluated classes.
    pub pr_samples: Vec<(f64, f64)>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub num_images: usize,
    pub num_ground_truths: usize,
}

fn sample_envelope(curve: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            let p = curve.iter().position(|c| c.0 >= r - 1e-12).map_or(0.0, |j| envelope[j]);
            (r, p)
        })
        .collect()
}

/// Metrics over per-image detections and ground truths.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
) -> EvalReport {
    let mut report = EvalReport {
        thresholds: thresholds.to_vec(),
        num_images: gts.len(),
        num_ground_truths: gts.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    let mut evaluated = 0usize;
    let mut pr_acc = vec![0.0; 101];
    let mut sums = vec![0.0; thresholds.len()];
    for class in 0..num_classes {
        let cd: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().filter(|x| x.class_id == class).copied().collect())
            .collect();
        let cg: Vec<Vec<BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|x| x.class_id == class).map(|x| x.bbox).collect())
            .collect();
        let has_gt = cg.iter().any(|g| !g.is_empty());
        let has_det = cd.iter().any(|d| !d.is_empty());
        let mut aps = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let r = average_precision(&cd, &cg, t);
            if (t - 0.5).abs() < 1e-9 {
                report.true_positives += r.true_positives;
                report.false_positives += r.false_positives;
                report.false_negatives += r.num_gt - r.true_positives;
                if has_gt {
                    for (acc, (_, p)) in pr_acc.iter_mut().zip(sample_envelope(&r.curve)) {
                        *acc += p;
                    }
                }
            }
            if has_gt || has_det {
                sums[ti] += r.ap;
            }
            aps.push(r.ap);
        }
        if has_gt || has_det {
            evaluated += 1;
        }
        report.per_class_ap.push(aps);
    }
    let gt_classes = (0..num_classes)
        .filter(|c| gts.iter().flatten().any(|g| g.class_id == *c))
        .count()
        .max(1);
    report.pr_samples = pr_acc
        .iter()
        .enumerate()
        .map(|(i, p)| (i as f64 / 100.0, p / gt_classes as f64))
        .collect();
    let per_threshold: Vec<f64> = if evaluated == 0 {
        vec![1.0; thresholds.len()]
    } else {
        sums.iter().map(|s| s / evaluated as f64).collect()
    };
    report.map50 = thresholds
        .iter()
        .position(|t| (t - 0.5).abs() < 1e-9)
        .map_or(0.0, |i| per_threshold[i]);
    report.map50_95 = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
    report
}

/// Thresholds applied to raw predictions before matching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
}

/// Anything that turns a batch of images into per-image detections.
pub trait Detector: Sync {
    /// `images` is `[B,3,S,S]`; `first_index` is the dataset index of the
    /// first image in the batch.
    fn detect(&self, images: &Tensor, first_index: usize, post: &PostConfig) -> Result<Vec<Vec<Detection>>>;
}

impl Detector for Model {
    fn detect(&self, images: &Tensor, _first_index: usize, post: &PostConfig) -> Result<Vec<Vec<Detection>>> {
        let preds = self.predict(images)?;
        let batch = images.shape()[0];
        Ok(par::map_range(batch, |b| {
            postprocess(&preds, b, &self.cfg, post.conf_thresh, post.iou_thresh)
        }))
    }
}

/// Stand-in detector that reports the ground truth with confidence 1.
pub struct GroundTruthDetector {
    pub truth: Vec<Vec<GroundTruth>>,
}

impl Detector for GroundTruthDetector {
    fn detect(&self, images: &Tensor, first_index: usize, _post: &PostConfig) -> Result<Vec<Vec<Detection>>> {
        let batch = images.shape()[0];
        Ok((first_index..first_index + batch)
            .map(|i| {
                self.truth[i]
                    .iter()
                    .map(|g| Detection {
                        class_id: g.class_id,
                        bbox: g.bbox,
                        confidence: 1.0,
                    })
                    .collect()
            })
            .collect())
    }
}

/// Pixel ground truth for a dataset sample.
pub fn ground_truth(sample: &Sample, image_size: usize) -> Vec<GroundTruth> {
    sample
        .annotations
        .iter()
        .map(|a| GroundTruth {
            class_id: a.class_id,
            bbox: a.bbox.to_corner().to_pixels(image_size as f64),
        })
        .collect()
}

/// Runs `detector` over `samples` in batches and scores the result.
pub fn evaluate(
    detector: &dyn Detector,
    samples: &[Sample],
    num_classes: usize,
    image_size: usize,
    post: &PostConfig,
    batch_size: usize,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "dataset is empty"));
    }
    let mut dets = Vec::with_capacity(samples.len());
    for (chunk_index, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let batch = crate::dataio::stack_images(chunk)?;
        dets.extend(detector.detect(&batch, chunk_index * batch_size.max(1), post)?);
    }
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(|s| ground_truth(s, image_size)).collect();
    Ok((evaluate_detections(&dets, &gts, num_classes, &coco_thresholds()), dets))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map50: {:.6}", self.map50);
        let _ = writeln!(s, "map50_95: {:.6}", self.map50_95);
        let _ = writeln!(s, "images: {}", self.num_images);
        let _ = writeln!(s, "ground_truths: {}", self.num_ground_truths);
        let _ = writeln!(s, "tp50: {}", self.true_positives);
        let _ = writeln!(s, "fp50: {}", self.false_positives);
        let _ = writeln!(s, "fn50: {}", self.false_negatives);
        for (c, aps) in self.per_class_ap.iter().enumerate() {
            let cells: Vec<String> = aps.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "class{c}_ap: {}", cells.join(" "));
        }
        let _ = writeln!(s, "\n# recall precision");
        for (r, p) in &self.pr_samples {
            let _ = writeln!(s, "{r:.2} {p:.6}");
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json` side by side in `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::Units;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::corner(x1, y1, x2, y2, Units::Pixels)
    }

    fn d(x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> Detection {
        Detection::new(0, x1, y1, x2, y2, conf)
    }

    #[test]
    fn single_match_is_perfect() {
        let r = average_precision(&[vec![d(0., 0., 10., 10., 0.6)]], &[vec![b(0., 0., 10., 9.)]], 0.5);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn no_detections() {
        let r = average_precision(&[vec![]], &[vec![b(0., 0., 10., 10.)]], 0.5);
        assert_eq!(r.ap, 0.0);
        assert_eq!(average_precision(&[vec![]], &[vec![]], 0.5).ap, 1.0);
        assert_eq!(
            average_precision(&[vec![d(0., 0., 1., 1., 0.5)]], &[vec![]], 0.5).ap,
            0.0
        );
    }

    #[test]
    fn tp_fp_tp_envelope() {
        let gts = vec![vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.)]];
        let dets = vec![vec![
            d(0., 0., 10., 10., 0.9),
            d(50., 50., 60., 60., 0.8),
            d(20., 20., 30., 30., 0.7),
        ]];
        let r = average_precision(&dets, &gts, 0.5);
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn one_to_one_matching() {
        let gts = vec![vec![b(0., 0., 10., 10.)]];
        let dets = vec![vec![d(0., 0., 10., 10., 0.9), d(0., 0., 10., 10., 0.8)]];
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!((r.true_positives, r.false_positives), (1, 1));
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn report_counts_and_maps() {
        let gts = vec![
            vec![GroundTruth {
                class_id: 0,
                bbox: b(0., 0., 10., 10.),
            }],
            vec![],
        ];
        let dets = vec![vec![d(0., 0., 10., 10., 1.0)], vec![]];
        let r = evaluate_detections(&dets, &gts, 1, &coco_thresholds());
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!(r.true_positives + r.false_negatives, 1);
        let none = evaluate_detections(&[vec![], vec![]], &gts, 1, &coco_thresholds());
        assert_eq!(none.map50, 0.0);
        assert_eq!(none.false_negatives, 1);
        assert!(r.to_text().contains("map50: 1.000000"));
    }
}
