mod common;

use proptest::prelude::*;
use rand::Rng;

use vkdet::embedding::{dot, Matrix};
use vkdet::geometry::{BBox, Proposal};
use vkdet::infer::{fuse, fuse_components, infer_image, InferenceConfig, ScoreComponents, SmiModel};
use vkdet::prototype::{ClassifierBank, PrototypeBank};
use vkdet::pseudolabel::ClusterModel;

use common::*;

fn softmax_at(logits: &[f64], tau: f64, i: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|z| ((z - m) / tau).exp()).sum();
    ((logits[i] - m) / tau).exp() / total
}

struct Fixture {
    novel: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    protos: Vec<Vec<f64>>,
    base_rows: Vec<Vec<f64>>,
    model: SmiModel,
}

fn fixture(seed: u64, d: usize, with_base: bool) -> Fixture {
    let mut r = rng(seed);
    let novel: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut r, d)).collect();
    let k = 5;
    let centers: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut r, d)).collect();
    let protos: Vec<Vec<f64>> = (0..=k).map(|_| unit(&mut r, d)).collect();
    let base_rows: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut r, d)).collect();
    let cm = ClusterModel {
        centers: Matrix::from_rows(&centers).unwrap(),
        k,
        inertia: 0.0,
        inertia_trace: Vec::new(),
        iterations: 0,
    };
    let base = with_base.then(|| {
        let classes = Matrix::from_rows(&base_rows[..2]).unwrap();
        (vec!["b0".to_string(), "b1".to_string()], ClassifierBank::new(&classes, &base_rows[2]).unwrap())
    });
    let model = SmiModel::new(
        vec!["n0".into(), "n1".into(), "n2".into()],
        Matrix::from_rows(&novel).unwrap(),
        PrototypeBank::new(Matrix::from_rows(&protos).unwrap()).unwrap(),
        &cm,
        base,
        &InferenceConfig::default(),
    )
    .unwrap();
    Fixture {
        novel,
        centers,
        protos,
        base_rows,
        model,
    }
}

/// Best `(class, score)` for one proposal, computed from the definitions.
fn oracle(fx: &Fixture, f: &[f64], l: f64, cfg: &InferenceConfig, with_base: bool) -> Option<(String, f64)> {
    let tau = cfg.tau;
    if with_base {
        let sims: Vec<f64> = fx.base_rows.iter().chain(&fx.novel).map(|r| dot(f, r)).collect();
        let probs: Vec<f64> = (0..sims.len()).map(|i| softmax_at(&sims, tau, i)).collect();
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        if best < 2 {
            let s = if cfg.components.objectness { (l * probs[best]).sqrt() } else { probs[best] };
            return Some((format!("b{best}"), s));
        }
    }
    let k = fx.centers.len();
    let proto_sims: Vec<f64> = fx.protos.iter().map(|u| dot(f, u)).collect();
    if cfg.components.prototype && softmax_at(&proto_sims, tau, k) > cfg.bg_threshold {
        return None;
    }
    let novel_sims: Vec<f64> = fx.novel.iter().map(|t| dot(f, t)).collect();
    let mut best: Option<(String, f64)> = None;
    for (c, t) in fx.novel.iter().enumerate() {
        let sd = softmax_at(&novel_sims, tau, c);
        // top-m centers by cosine, weighted by a unit-temperature softmax
        let mut cos: Vec<(usize, f64)> = fx
            .centers
            .iter()
            .enumerate()
            .map(|(j, v)| (j, dot(t, v) / dot(v, v).sqrt()))
            .collect();
        cos.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        cos.truncate(cfg.prototypes_per_class);
        let top: Vec<f64> = cos.iter().map(|c| c.1).collect();
        let sp: f64 = cos
            .iter()
            .enumerate()
            .map(|(i, &(j, _))| softmax_at(&top, 1.0, i) * softmax_at(&proto_sims[..k], tau, j))
            .sum();
        let cls = match (cfg.components.distill, cfg.components.prototype) {
            (true, true) => (sd * sp).sqrt(),
            (true, false) => sd,
            _ => sp,
        };
        let s = if cfg.components.objectness { (cls * l).sqrt() } else { cls };
        if best.as_ref().is_none_or(|b| s > b.1) {
            best = Some((format!("n{c}"), s));
        }
    }
    best
}

#[test]
fn infer_image_matches_exhaustive_scoring() {
    let d = 6;
    for (seed, with_base) in [(1, true), (2, false), (3, true)] {
        let fx = fixture(seed, d, with_base);
        let mut r = rng(seed + 50);
        for label in ["d", "p", "d+p", "d+l", "p+l", "d+p+l"] {
            let cfg = InferenceConfig {
                components: vkdet::pipeline::parse_components(label).unwrap(),
                tau: r.random_range(0.05..0.5),
                max_detections_per_image: 1000,
                ..InferenceConfig::default()
            };
            // disjoint boxes so that suppression never applies
            let n = 40;
            let proposals: Vec<Proposal> = (0..n)
                .map(|i| Proposal {
                    image_id: "im".into(),
                    bbox: BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0).unwrap(),
                    objectness: r.random_range(0.0..1.0),
                })
                .collect();
            let features: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
            let dets = infer_image(&proposals, &features, &fx.model, &cfg).unwrap();
            let mut want: Vec<(f64, String, f64)> = proposals
                .iter()
                .zip(&features)
                .filter_map(|(p, f)| oracle(&fx, f, p.objectness, &cfg, with_base).map(|(c, s)| (p.bbox.x1, c, s)))
                .collect();
            want.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            assert_eq!(dets.len(), want.len(), "{label}");
            for (det, (x1, class, s)) in dets.iter().zip(&want) {
                assert_eq!(det.bbox.x1, *x1, "{label}");
                assert_eq!(&det.class, class, "{label}");
                assert!((det.score_s - s).abs() < 1e-9, "{label}: {} vs {s}", det.score_s);
            }
        }
    }
}

#[test]
fn overlapping_boxes_of_one_class_are_suppressed() {
    let fx = fixture(4, 6, false);
    let cfg = InferenceConfig {
        bg_threshold: 1.0,
        ..InferenceConfig::default()
    };
    let f = fx.novel[0].clone();
    let proposals: Vec<Proposal> = [0.0, 1.0, 2.0]
        .iter()
        .map(|&dx| Proposal {
            image_id: "im".into(),
            bbox: BBox::new(dx, 0.0, 50.0 + dx, 50.0).unwrap(),
            objectness: 0.5 + dx / 10.0,
        })
        .collect();
    let dets = infer_image(&proposals, &vec![f; 3], &fx.model, &cfg).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].bbox, proposals[2].bbox);
}

proptest! {
    #[test]
    fn fusion_is_bounded_and_monotone(
        d in 0.0..1.0f64, p in 0.0..1.0f64, l in 0.0..1.0f64, bump in 0.0..1.0f64,
    ) {
        let (cls, s) = fuse(d, p, l).unwrap();
        prop_assert!(cls >= d.min(p) - 1e-15 && cls <= d.max(p) + 1e-15);
        prop_assert!(s >= l.min(cls) - 1e-15 && s <= l.max(cls) + 1e-15);
        prop_assert!(fuse(d + bump, p, l).unwrap().1 >= s);
        prop_assert!(fuse(d, p + bump, l).unwrap().1 >= s);
        prop_assert!(fuse(d, p, l + bump).unwrap().1 >= s);
        let only_d = ScoreComponents { distill: true, prototype: false, objectness: false };
        prop_assert_eq!(fuse_components(d, p, l, only_d).unwrap().1, d);
    }

    #[test]
    fn fusion_rejects_invalid_scores(v in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), -10.0..-1e-9f64]) {
        prop_assert!(fuse(v, 0.5, 0.5).is_err());
        prop_assert!(fuse(0.5, v, 0.5).is_err());
        prop_assert!(fuse(0.5, 0.5, v).is_err());
    }
}
