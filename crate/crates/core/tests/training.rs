mod common;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vkdet::distill::{apply_head, l1_distill_loss, train_distill, DistillHead, DistillPair};
use vkdet::embedding::{dot, EmbeddingKind, EmbeddingTable, Matrix};
use vkdet::prototype::{ce_loss, train_base_background, train_prototypes, ClassifierBank, PrototypeBank, Sample, TrainConfig};
use vkdet::pseudolabel::{ClusterModel, PseudoLabel, PseudoLabelSet};

use common::*;

/// Unit vectors scattered around `center` with angular noise `noise`.
fn around(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f64> {
    let v: Vec<f64> = center.iter().zip(gaussian(rng, center.len())).map(|(c, g)| c + noise * g).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn argmax(x: &[f64], rows: &Matrix) -> usize {
    rows.iter_rows()
        .map(|r| dot(x, r))
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn ce_loss_matches_direct_formula() {
    let mut r = rng(41);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut r, 6)).collect();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut r, 6)).collect();
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        let tau = r.random_range(0.05..1.0);
        let samples: Vec<Sample<'_>> = xs.iter().zip(&labels).map(|(x, &l)| (x.as_slice(), l)).collect();
        let got = ce_loss(&samples, &Matrix::from_rows(&rows).unwrap(), tau).unwrap();
        let want: f64 = xs
            .iter()
            .zip(&labels)
            .map(|(x, &l)| {
                let e: Vec<f64> = rows.iter().map(|row| (dot(x, row) / tau).exp()).collect();
                -(e[l] / e.iter().sum::<f64>()).ln()
            })
            .sum::<f64>()
            / xs.len() as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn prototypes_separate_held_out_clusters() {
    let mut r = rng(42);
    let (k, d) = (4, 16);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut r, d)).collect();
    let bg_center = unit(&mut r, d);
    let draw = |r: &mut ChaCha8Rng, c: &[f64], n: usize| (0..n).map(|_| around(r, c, 0.15)).collect::<Vec<_>>();

    let mut keys = Vec::new();
    let mut vectors = Vec::new();
    let mut records = Vec::new();
    for (j, c) in centers.iter().enumerate() {
        for v in draw(&mut r, c, 30) {
            let key = format!("u{j}:{}", keys.len());
            records.push(PseudoLabel {
                proposal_id: key.clone(),
                unknown_index: j + 1,
                distance: 0.0,
            });
            keys.push(key);
            vectors.push(v);
        }
    }
    let mut negatives = Vec::new();
    for v in draw(&mut r, &bg_center, 60) {
        let key = format!("bg:{}", keys.len());
        negatives.push(key.clone());
        keys.push(key);
        vectors.push(v);
    }
    let table = EmbeddingTable::new(EmbeddingKind::RoiFeature, keys, Matrix::from_rows(&vectors).unwrap()).unwrap();

    // start from rough centers so that training has work to do
    let rough: Vec<Vec<f64>> = centers.iter().map(|c| around(&mut r, c, 0.6)).collect();
    let cm = ClusterModel {
        centers: Matrix::from_rows(&rough).unwrap(),
        k,
        inertia: 0.0,
        inertia_trace: Vec::new(),
        iterations: 0,
    };
    let init = PrototypeBank::from_clusters(&cm, &[]).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        lr_decay_epochs: vec![15],
        ..TrainConfig::default()
    };
    let (bank, trace) =
        train_prototypes(&PseudoLabelSet { records }, &table, &negatives, &init, &cfg).unwrap();
    assert!(trace.last().unwrap() < trace.first().unwrap());

    let mut right = 0;
    let mut total = 0;
    for (j, c) in centers.iter().enumerate() {
        for v in draw(&mut r, c, 50) {
            right += usize::from(argmax(&v, &bank.prototypes) == j);
            total += 1;
        }
    }
    for v in draw(&mut r, &bg_center, 50) {
        right += usize::from(argmax(&v, &bank.prototypes) == k);
        total += 1;
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
    for row in bank.prototypes.iter_rows() {
        assert!((dot(row, row) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn base_background_row_learns_background_and_freezes_classes() {
    let mut r = rng(43);
    let d = 12;
    let class_rows: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut r, d)).collect();
    let bg_center = unit(&mut r, d);
    let mut xs = Vec::new();
    for (j, c) in class_rows.iter().enumerate() {
        for _ in 0..40 {
            xs.push((around(&mut r, c, 0.2), j));
        }
    }
    for _ in 0..80 {
        xs.push((around(&mut r, &bg_center, 0.2), 3));
    }
    let samples: Vec<Sample<'_>> = xs.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
    let classes = Matrix::from_rows(&class_rows).unwrap();
    let init = ClassifierBank::new(&classes, &unit(&mut r, d)).unwrap();
    let (bank, trace) = train_base_background(&samples, &init, &TrainConfig::default()).unwrap();
    assert!(trace.last().unwrap() < trace.first().unwrap());
    for j in 0..3 {
        assert_eq!(bank.rows.row(j), classes.row(j));
    }
    let mut right = 0;
    for (j, c) in class_rows.iter().chain([&bg_center]).enumerate() {
        for _ in 0..50 {
            right += usize::from(argmax(&around(&mut r, c, 0.2), &bank.rows) == j);
        }
    }
    let acc = right as f64 / 200.0;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn small_steps_give_a_non_increasing_trace() {
    let mut r = rng(44);
    let d = 8;
    let class_rows: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut r, d)).collect();
    let xs: Vec<(Vec<f64>, usize)> = (0..120).map(|i| (unit(&mut r, d), i % 4)).collect();
    let samples: Vec<Sample<'_>> = xs.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
    let init = ClassifierBank::new(&Matrix::from_rows(&class_rows).unwrap(), &unit(&mut r, d)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        tau: 0.2,
        batch_size: 120,
        epochs: 30,
        lr_decay_epochs: Vec::new(),
        ..TrainConfig::default()
    };
    let (_, trace) = train_base_background(&samples, &init, &cfg).unwrap();
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn distillation_fits_a_realizable_map() {
    let mut r = rng(45);
    let (d, d_in) = (6, 10);
    let truth = DistillHead::random(d, d_in, 9);
    let raws: Vec<Vec<f64>> = (0..300).map(|_| gaussian(&mut r, d_in)).collect();
    let targets: Vec<Vec<f64>> = raws.iter().map(|x| apply_head(&truth, x).unwrap()).collect();
    let pairs: Vec<DistillPair<'_>> = raws.iter().zip(&targets).map(|(x, t)| (x.as_slice(), t.as_slice())).collect();
    let start = DistillHead::random(d, d_in, 10);
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 40,
        batch_size: 32,
        lr_decay_epochs: vec![25, 35],
        ..TrainConfig::default()
    };
    let (head, trace) = train_distill(&start, &pairs, &cfg).unwrap();
    let initial = l1_distill_loss(&start, &pairs).unwrap();
    let fin = l1_distill_loss(&head, &pairs).unwrap();
    assert_eq!(trace[0], initial);
    assert_eq!(*trace.last().unwrap(), fin);
    assert!(fin < 0.1 * initial, "{initial} -> {fin}");
}
