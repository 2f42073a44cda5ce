//! Cosine classifiers over frozen embeddings: the trainable prototype bank
//! (`unknown-1..unknown-k` plus background) and the base classifier whose
//! class rows are frozen text embeddings with one learnable background row.
//!
//! Both minimise the temperature-scaled cross-entropy
//! `-log softmax(<x, row_j> / tau)[label]` with plain SGD; trainable rows are
//! renormalised to unit length after every step.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize_in_place, normalized, EmbeddingTable, Matrix};
use crate::error::{Error, Result};
use crate::pseudolabel::{ClusterModel, PseudoLabelSet};

/// Feature with its target row.
pub type Sample<'a> = (&'a [f64], usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    /// Zero-based epochs from which the rate is divided by ten again.
    pub lr_decay_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 12,
            batch_size: 64,
            tau: 0.05,
            seed: 0,
            lr_decay_epochs: vec![8, 11],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("{prefix}.tau"), "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.learning_rate * 0.1f64.powi(decays as i32)
    }
}

fn check_samples(samples: &[Sample<'_>], bank: &Matrix) -> Result<()> {
    for (x, label) in samples {
        if *label >= bank.rows() {
            return Err(Error::invalid(format!(
                "label {label} out of range for bank of {} rows",
                bank.rows()
            )));
        }
        if x.len() != bank.cols() {
            return Err(Error::DimensionMismatch {
                expected: bank.cols(),
                found: x.len(),
            });
        }
    }
    Ok(())
}

fn probabilities(x: &[f64], bank: &Matrix, tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = bank.iter_rows().map(|r| dot(x, r) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sample_loss(x: &[f64], label: usize, bank: &Matrix, tau: f64) -> f64 {
    let logits: Vec<f64> = bank.iter_rows().map(|r| dot(x, r) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (lse - logits[label]).max(0.0)
}

/// Mean cross-entropy of `samples` against the rows of `bank`.
pub fn ce_loss(samples: &[Sample<'_>], bank: &Matrix, tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cross-entropy needs at least one sample"));
    }
    check_samples(samples, bank)?;
    let total: f64 = samples
        .iter()
        .map(|(x, label)| sample_loss(x, *label, bank, tau))
        .sum();
    Ok(total / samples.len() as f64)
}

/// Gradient of [`ce_loss`] with respect to the bank rows; rows with
/// `trainable[j] == false` get exact zeros.
pub fn ce_grad(samples: &[Sample<'_>], bank: &Matrix, trainable: &[bool], tau: f64) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(Error::invalid("cross-entropy needs at least one sample"));
    }
    if trainable.len() != bank.rows() {
        return Err(Error::DimensionMismatch {
            expected: bank.rows(),
            found: trainable.len(),
        });
    }
    check_samples(samples, bank)?;
    let scale = 1.0 / (tau * samples.len() as f64);
    let mut grad = Matrix::zeros(bank.rows(), bank.cols());
    for (x, label) in samples {
        let p = probabilities(x, bank, tau);
        for (j, pj) in p.iter().enumerate() {
            if !trainable[j] {
                continue;
            }
            let coeff = (pj - if j == *label { 1.0 } else { 0.0 }) * scale;
            for (g, xi) in grad.row_mut(j).iter_mut().zip(x.iter()) {
                *g += coeff * xi;
            }
        }
    }
    Ok(grad)
}

/// Epoch loop shared by both classifiers. `draw_epoch` produces the samples
/// seen in one epoch; `eval_set` is scored after every epoch for the trace.
fn sgd_rows<'a, F>(
    bank: &Matrix,
    trainable: &[bool],
    cfg: &TrainConfig,
    eval_set: &[Sample<'a>],
    mut draw_epoch: F,
) -> Result<(Matrix, Vec<f64>)>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<Sample<'a>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = bank.clone();
    let mut trace = vec![ce_loss(eval_set, &rows, cfg.tau)?];
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut samples = draw_epoch(&mut rng);
        samples.shuffle(&mut rng);
        for batch in samples.chunks(cfg.batch_size) {
            if lr == 0.0 {
                continue;
            }
            let grad = ce_grad(batch, &rows, trainable, cfg.tau)?;
            for j in (0..rows.rows()).filter(|&j| trainable[j]) {
                for (w, g) in rows.row_mut(j).iter_mut().zip(grad.row(j)) {
                    *w -= lr * g;
                }
                normalize_in_place(rows.row_mut(j))?;
            }
        }
        trace.push(ce_loss(eval_set, &rows, cfg.tau)?);
    }
    Ok((rows, trace))
}

/// `k` unknown-class prototypes followed by one background row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Matrix,
    pub trainable: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(prototypes: Matrix) -> Result<Self> {
        if prototypes.rows() < 2 {
            return Err(Error::invalid("prototype bank needs k >= 1 plus background"));
        }
        let trainable = vec![true; prototypes.rows()];
        Ok(Self {
            prototypes,
            trainable,
        })
    }

    /// Prototype `j` starts at the normalised cluster center `v_j`; the
    /// background row at the normalised mean of `negatives` (or of the
    /// negated centers when there are none).
    pub fn from_clusters(cm: &ClusterModel, negatives: &[&[f64]]) -> Result<Self> {
        let d = cm.centers.cols();
        let mut rows = Matrix::zeros(cm.k + 1, d);
        for j in 0..cm.k {
            rows.row_mut(j).copy_from_slice(&normalized(cm.centers.row(j))?);
        }
        let mut bg = vec![0.0; d];
        if negatives.is_empty() {
            for c in cm.centers.iter_rows() {
                bg.iter_mut().zip(c).for_each(|(b, x)| *b -= x);
            }
        } else {
            for n in negatives {
                bg.iter_mut().zip(n.iter()).for_each(|(b, x)| *b += x);
            }
        }
        rows.row_mut(cm.k).copy_from_slice(&normalized(&bg)?);
        Self::new(rows)
    }

    /// Number of unknown prototypes, excluding background.
    pub fn k(&self) -> usize {
        self.prototypes.rows() - 1
    }

    pub fn background_index(&self) -> usize {
        self.k()
    }

    pub fn unknown_row(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    pub fn unknown_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.prototypes.iter_rows().take(self.k())
    }
}

/// Trains the prototype bank on pseudo-labels (label `unknown-j` maps to row
/// `j - 1`) plus background negatives resampled every epoch, capped at the
/// size of the pseudo-label set.
pub fn train_prototypes(
    pseudo: &PseudoLabelSet,
    features: &EmbeddingTable,
    negative_ids: &[String],
    bank: &PrototypeBank,
    cfg: &TrainConfig,
) -> Result<(PrototypeBank, Vec<f64>)> {
    if pseudo.is_empty() {
        return Err(Error::invalid("pseudo-label set is empty"));
    }
    let index = features.index();
    let lookup = |id: &str| -> Result<&[f64]> {
        index
            .get(id)
            .map(|&i| features.get(i))
            .ok_or_else(|| Error::invalid(format!("no feature for proposal `{id}`")))
    };
    let k = bank.k();
    let mut positives = Vec::with_capacity(pseudo.len());
    for r in &pseudo.records {
        if r.unknown_index == 0 || r.unknown_index > k {
            return Err(Error::invalid(format!(
                "pseudo-label unknown-{} outside 1..={k}",
                r.unknown_index
            )));
        }
        positives.push((lookup(&r.proposal_id)?, r.unknown_index - 1));
    }
    let negatives = negative_ids
        .iter()
        .map(|id| Ok((lookup(id)?, k)))
        .collect::<Result<Vec<Sample<'_>>>>()?;
    let cap = negatives.len().min(positives.len());
    let eval_set: Vec<Sample<'_>> = positives.iter().chain(&negatives).copied().collect();

    let (rows, trace) = sgd_rows(&bank.prototypes, &bank.trainable, cfg, &eval_set, |rng| {
        let mut epoch = positives.clone();
        epoch.extend(negatives.choose_multiple(rng, cap).copied());
        epoch
    })?;
    Ok((
        PrototypeBank {
            prototypes: rows,
            trainable: bank.trainable.clone(),
        },
        trace,
    ))
}

/// Frozen class rows followed by one learnable background row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    pub rows: Matrix,
}

impl ClassifierBank {
    pub fn new(class_rows: &Matrix, background: &[f64]) -> Result<Self> {
        if background.len() != class_rows.cols() {
            return Err(Error::DimensionMismatch {
                expected: class_rows.cols(),
                found: background.len(),
            });
        }
        let mut rows: Vec<Vec<f64>> = class_rows.to_rows();
        rows.push(normalized(background)?);
        Ok(Self {
            rows: Matrix::from_rows(&rows)?,
        })
    }

    pub fn from_matrix(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::invalid("classifier bank needs a class row and a background row"));
        }
        Ok(Self { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows() - 1
    }

    pub fn background_index(&self) -> usize {
        self.num_classes()
    }

    pub fn trainable(&self) -> Vec<bool> {
        let mut t = vec![false; self.rows.rows()];
        t[self.background_index()] = true;
        t
    }
}

/// Trains only the background row; labels index the class rows, with
/// `num_classes()` meaning background.
pub fn train_base_background(
    samples: &[Sample<'_>],
    bank: &ClassifierBank,
    cfg: &TrainConfig,
) -> Result<(ClassifierBank, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("base classifier training set is empty"));
    }
    let trainable = bank.trainable();
    let (rows, trace) = sgd_rows(&bank.rows, &trainable, cfg, samples, |_| samples.to_vec())?;
    Ok((ClassifierBank { rows }, trace))
}
