mod common;

use cbam_detect::bbox::{BBox, Units};
use cbam_detect::dataio::{synthetic_samples, SynthSceneConfig};
use cbam_detect::detector::ModelConfig;
use cbam_detect::eval::{
    average_precision, coco_thresholds, evaluate, evaluate_detections, GroundTruth, GroundTruthDetector, PostConfig,
};
use cbam_detect::loss::{build_targets, Annotation};
use cbam_detect::postprocess::{nms, Detection};
use cbam_detect::tensor::kernels::{conv2d_forward, conv2d_naive};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn det_strategy(classes: usize) -> impl Strategy<Value = Detection> {
    (
        0..classes,
        0.0..40.0f64,
        0.0..40.0f64,
        1.0..20.0f64,
        1.0..20.0f64,
        0.0..1.0f64,
    )
        .prop_map(|(c, x, y, w, h, conf)| Detection::new(c, x, y, x + w, y + h, conf))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_equals_brute_force(dets in prop::collection::vec(det_strategy(3), 0..80), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert_eq!(&kept, &nms_brute(&dets, thr));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || cbam_detect::bbox::iou(&a.bbox, &b.bbox) <= thr);
            }
        }
    }

    #[test]
    fn nms_with_tied_confidences(dets in prop::collection::vec(det_strategy(2), 0..40)) {
        let tied: Vec<Detection> = dets.iter().map(|d| Detection { confidence: 0.5, ..*d }).collect();
        prop_assert_eq!(nms(&tied, 0.45), nms_brute(&tied, 0.45));
    }

    #[test]
    fn ap_equals_envelope_oracle(
        images in prop::collection::vec(
            (prop::collection::vec(det_strategy(1), 0..8), prop::collection::vec(det_strategy(1), 0..5)),
            1..6,
        ),
        thr in prop::sample::select(vec![0.3, 0.5, 0.75]),
    ) {
        let dets: Vec<Vec<Detection>> = images.iter().map(|(d, _)| d.clone()).collect();
        let gts: Vec<Vec<BBox>> = images.iter().map(|(_, g)| g.iter().map(|d| d.bbox).collect()).collect();
        let gts_raw: Vec<Vec<[f64; 4]>> = gts.iter().map(|g| g.iter().map(|b| b.coords).collect()).collect();
        let got = average_precision(&dets, &gts, thr).ap;
        let want = ap_oracle(&dets, &gts_raw, thr);
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn conv_im2col_equals_naive(
        b in 1usize..3, c in 1usize..5, o in 1usize..5, h in 1usize..9, w in 1usize..9,
        k in prop::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let padding = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[b, c, h, w], &mut rng, -1.0, 1.0);
        let wt = random_tensor(&[o, c, k, k], &mut rng, -1.0, 1.0);
        let bias = random_tensor(&[o], &mut rng, -1.0, 1.0);
        let fast = conv2d_forward(&x, &wt, Some(&bias), stride, padding).unwrap();
        let slow = conv2d_naive(&x, &wt, Some(&bias), stride, padding).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-9);
    }

    #[test]
    fn build_targets_equals_exhaustive_scan(
        anns in prop::collection::vec(
            prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0.002..0.9f64, 0.002..0.9f64), 0..5),
            1..4,
        ),
        size in prop::sample::select(vec![32usize, 64, 96]),
    ) {
        let cfg = ModelConfig { input_size: size, ..Default::default() };
        let anns: Vec<Vec<Annotation>> = anns
            .iter()
            .map(|a| a.iter().map(|&(cx, cy, w, h)| Annotation::new(0, cx, cy, w, h)).collect())
            .collect();
        let t = build_targets(&anns, &cfg);
        let mut got: Vec<AssignKey> = t
            .entries
            .iter()
            .map(|e| (e.image, e.annotation, e.scale, e.anchor, e.grid_y, e.grid_x, e.target.map(f64::to_bits)))
            .collect();
        got.sort();
        let want = assign_oracle(&anns, &cfg);
        prop_assert_eq!(&got, &want);
        let total: usize = anns.iter().map(Vec::len).sum();
        let mut covered: Vec<(usize, usize)> = want.iter().map(|k| (k.0, k.1)).collect();
        covered.dedup();
        prop_assert_eq!(t.unmatched, total - covered.len());
    }
}

#[test]
fn ap_hand_example() {
    let gts = vec![vec![
        BBox::corner(0., 0., 10., 10., Units::Pixels),
        BBox::corner(20., 20., 30., 30., Units::Pixels),
    ]];
    let dets = vec![vec![
        Detection::new(0, 0., 0., 10., 10., 0.9),
        Detection::new(0, 50., 50., 60., 60., 0.8),
        Detection::new(0, 20., 20., 30., 30., 0.7),
    ]];
    // recall/precision: (1/2, 1), (1/2, 1/2), (1, 2/3)
    let ap = average_precision(&dets, &gts, 0.5).ap;
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
}

fn gt(x1: f64, y1: f64) -> GroundTruth {
    GroundTruth {
        class_id: 0,
        bbox: BBox::corner(x1, y1, x1 + 10.0, y1 + 10.0, Units::Pixels),
    }
}

#[test]
fn ten_image_evaluation_matches_hand_computation() {
    let gts: Vec<Vec<GroundTruth>> = (0..10).map(|i| vec![gt(5.0 * i as f64, 7.0)]).collect();
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        let [x1, y1, x2, y2] = g[0].bbox.coords;
        dets.push(match i {
            // exact hits ranked 0.9 down to 0.2
            0..=7 => vec![Detection::new(0, x1, y1, x2, y2, 0.9 - 0.1 * i as f64)],
            // shifted by 2 px: IoU 80/120
            _ => vec![Detection::new(
                0,
                x1 + 2.0,
                y1,
                x2 + 2.0,
                y2,
                0.15 - 0.05 * (i - 8) as f64,
            )],
        });
    }
    // a confident miss ranked first
    dets[0].push(Detection::new(0, 60.0, 60.0, 70.0, 70.0, 0.95));

    let report = evaluate_detections(&dets, &gts, 1, &coco_thresholds());
    // IoU thresholds up to 0.65: 10 hits after one miss, envelope 10/11 throughout
    let loose = 10.0 / 11.0;
    // above: 8 hits after one miss, envelope 8/9 over recall 0.8
    let strict = 0.8 * 8.0 / 9.0;
    assert!((report.map50 - loose).abs() < 1e-12, "{}", report.map50);
    let want = (4.0 * loose + 6.0 * strict) / 10.0;
    assert!((report.map50_95 - want).abs() < 1e-12, "{} vs {want}", report.map50_95);
    assert_eq!(
        (report.true_positives, report.false_positives, report.false_negatives),
        (10, 1, 0)
    );
}

#[test]
fn ground_truth_detector_scores_one() {
    let synth = SynthSceneConfig {
        image_size: 64,
        ..Default::default()
    };
    let samples = synthetic_samples(&synth, 10, 64);
    let truth = samples.iter().map(|s| cbam_detect::eval::ground_truth(s, 64)).collect();
    let det = GroundTruthDetector { truth };
    let post = PostConfig {
        conf_thresh: 0.001,
        iou_thresh: 0.45,
    };
    let (report, _) = evaluate(&det, &samples, 1, 64, &post, 3).unwrap();
    assert_eq!(report.map50, 1.0);
    assert_eq!(report.map50_95, 1.0);
    assert_eq!(cbam_detect::cli::map50_line(&report), "map50: 1.000000");
}
