mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use vkdet::embedding::CategorySpace;
use vkdet::eval::{average_precision, evaluate, harmonic_mean, Detection, GroundTruth};

use common::*;

fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}

#[test]
fn ap_matches_prefix_enumeration() {
    let mut rng = rng(21);
    for _ in 0..500 {
        let (dets, gts) = ap_scenario(&mut rng);
        let got = average_precision(&refs(&dets), &refs(&gts), 0.5);
        let want = naive_ap(&dets, &gts, 0.5);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn ap_ignores_input_order() {
    let mut rng = rng(22);
    for _ in 0..100 {
        let (mut dets, mut gts) = ap_scenario(&mut rng);
        let before = average_precision(&refs(&dets), &refs(&gts), 0.5);
        dets.shuffle(&mut rng);
        gts.shuffle(&mut rng);
        assert_eq!(before, average_precision(&refs(&dets), &refs(&gts), 0.5));
    }
}

#[test]
fn exact_top_detection_of_missed_object_never_lowers_ap() {
    let mut rng = rng(23);
    let mut tried = 0;
    while tried < 200 {
        let (mut dets, gts) = ap_scenario(&mut rng);
        let missed = gts
            .iter()
            .find(|g| dets.iter().all(|d| d.image_id != g.image_id || box_iou(&d.bbox, &g.bbox) < 0.5));
        let Some(g) = missed.cloned() else { continue };
        tried += 1;
        let before = average_precision(&refs(&dets), &refs(&gts), 0.5).unwrap();
        dets.push(Detection {
            image_id: g.image_id.clone(),
            class: g.class.clone(),
            bbox: g.bbox,
            score_s: 2.0,
            score_d: 0.0,
            score_p: 0.0,
            score_l: 0.0,
        });
        let after = average_precision(&refs(&dets), &refs(&gts), 0.5).unwrap();
        assert!(after >= before - 1e-12, "{before} -> {after}");
    }
}

#[test]
fn perfect_detections_score_one_everywhere() {
    let mut rng = rng(24);
    let (_, gts) = ap_scenario(&mut rng);
    let mut gts: Vec<GroundTruth> = gts;
    for (i, g) in gts.iter_mut().enumerate() {
        g.class = if i % 2 == 0 { "b".into() } else { "n".into() };
    }
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id.clone(),
            class: g.class.clone(),
            bbox: g.bbox,
            score_s: 1.0,
            score_d: 1.0,
            score_p: 1.0,
            score_l: 1.0,
        })
        .collect();
    let space = CategorySpace::new(vec!["b".into()], vec!["n".into()], 0).unwrap();
    let r = evaluate(&dets, &gts, &space);
    if gts.len() >= 2 {
        assert_eq!(r.hm, 1.0);
    }
}

proptest! {
    #[test]
    fn hm_lies_between_min_and_twice_min(b in 0.0..1.0f64, n in 0.0..1.0f64) {
        let h = harmonic_mean(b, n);
        prop_assert!(h >= b.min(n) - 1e-15);
        prop_assert!(h <= 2.0 * b.min(n) + 1e-15);
        prop_assert!(h <= b.max(n) + 1e-15);
        prop_assert!((h - harmonic_mean(n, b)).abs() < 1e-15);
    }
}
