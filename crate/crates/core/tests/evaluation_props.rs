use nmsloss::evaluation::{
    evaluate_scene, match_detections, mr_fppi, nms_event_counts, reasonable_filter, EvalConfig, MatchLabel,
    SceneMatches, MISS_RATE_FLOOR,
};
use nmsloss::scenegen::{generate_scene, SceneSpec, VisibilityModel};
use nmsloss::{nms_loss_forward_backward, LossConfig};
use proptest::prelude::*;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, visibility_model: VisibilityModel::PairwiseOcclusion, crowd_iou: 0.3, ..SceneSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_account_for_every_kept_detection(seed in 0u64..10_000, nt in 0.3..0.7f64) {
        let scene = generate_scene(&spec(seed)).unwrap();
        let loss = LossConfig { nt, ..LossConfig::default() };
        let cfg = EvalConfig::default();
        let e = evaluate_scene(&scene, &loss, &cfg).unwrap();
        let r = nms_loss_forward_backward(&scene.detections, &scene.gt_boxes(), &loss).unwrap();
        prop_assert_eq!(e.matches.labels.len(), r.kept.len());
        let tp = e.matches.labels.iter().filter(|l| **l == MatchLabel::Tp).count();
        prop_assert!(tp <= e.matches.n_evaluated_gt);
        prop_assert_eq!(nms_event_counts(&scene, &loss).unwrap(), (r.pull_events.len(), r.push_events.len()));
        prop_assert_eq!((e.nms_fp, e.nms_fn), (r.pull_events.len(), r.push_events.len()));
    }

    #[test]
    fn log_average_depends_only_on_score_order(seeds in prop::collection::vec(0u64..10_000, 1..8), power in 0.2..5.0f64, shift in 0.0..3.0f64) {
        let cfg = EvalConfig::default();
        let loss = LossConfig::default();
        let matches: Vec<SceneMatches> = seeds.iter().map(|&s| evaluate_scene(&generate_scene(&spec(s)).unwrap(), &loss, &cfg).unwrap().matches).collect();
        prop_assume!(matches.iter().map(|m| m.n_evaluated_gt).sum::<usize>() > 0);
        let transformed: Vec<SceneMatches> = matches
            .iter()
            .map(|m| SceneMatches { scores: m.scores.iter().map(|s| s.powf(power) * 0.5 + shift).collect(), ..m.clone() })
            .collect();
        let a = mr_fppi(&matches, &cfg).unwrap();
        let b = mr_fppi(&transformed, &cfg).unwrap();
        prop_assert_eq!(a.curve, b.curve);
        prop_assert_eq!(a.mr_log_average, b.mr_log_average);
    }
}

#[test]
fn matching_examples() {
    use nmsloss::scenegen::GtBox;
    use nmsloss::{BBox, Detection};
    let cfg = EvalConfig::default();
    let gt = vec![GtBox::new(BBox::new(0.0, 0.0, 30.0, 80.0).unwrap(), 1.0, false).unwrap()];
    let part = reasonable_filter(&gt, &cfg);
    let det = |c: [f64; 4], s: f64| Detection::new(BBox::from_array(c).unwrap(), s, None).unwrap();

    let m = match_detections(&[det([0.0, 0.0, 30.0, 80.0], 0.9)], &gt, &part, &cfg).unwrap();
    assert_eq!((m.labels, m.gt_matched), (vec![MatchLabel::Tp], vec![true]));
    let m = match_detections(&[det([100.0, 0.0, 130.0, 80.0], 0.9)], &gt, &part, &cfg).unwrap();
    assert_eq!(m.labels, vec![MatchLabel::Fp]);
    let two = [det([0.0, 0.0, 30.0, 80.0], 0.9), det([2.0, 0.0, 32.0, 80.0], 0.8)];
    let m = match_detections(&two, &gt, &part, &cfg).unwrap();
    assert_eq!(m.labels, vec![MatchLabel::Tp, MatchLabel::Fp]);
    let unsorted = [det([0.0, 0.0, 30.0, 80.0], 0.5), det([2.0, 0.0, 32.0, 80.0], 0.8)];
    assert!(match_detections(&unsorted, &gt, &part, &cfg).is_err());

    // detections on an ignored pedestrian are neither rewarded nor penalised
    let small = vec![GtBox::new(BBox::new(0.0, 0.0, 10.0, 40.0).unwrap(), 1.0, false).unwrap()];
    let part = reasonable_filter(&small, &cfg);
    let m =
        match_detections(&[det([0.0, 0.0, 10.0, 40.0], 0.9), det([0.5, 0.0, 10.5, 40.0], 0.8)], &small, &part, &cfg)
            .unwrap();
    assert_eq!(m.labels, vec![MatchLabel::IgnoredMatch; 2]);
}

#[test]
fn degenerate_detectors() {
    let cfg = EvalConfig::default();
    let perfect: Vec<SceneMatches> = (0..5)
        .map(|_| SceneMatches { scores: vec![0.9, 0.8], labels: vec![MatchLabel::Tp; 2], n_evaluated_gt: 2 })
        .collect();
    let r = mr_fppi(&perfect, &cfg).unwrap();
    assert!(r.mr_log_average <= MISS_RATE_FLOOR * (1.0 + 1e-12));
    assert!(r.curve.iter().all(|(_, m)| *m == 0.0));

    let blind: Vec<SceneMatches> =
        (0..5).map(|_| SceneMatches { scores: vec![], labels: vec![], n_evaluated_gt: 3 }).collect();
    let r = mr_fppi(&blind, &cfg).unwrap();
    assert_eq!(r.mr_log_average, 1.0);
    assert_eq!(r.curve.len(), 9);

    let empty = [SceneMatches { scores: vec![0.5], labels: vec![MatchLabel::Fp], n_evaluated_gt: 0 }];
    assert!(mr_fppi(&empty, &cfg).is_err());
}
