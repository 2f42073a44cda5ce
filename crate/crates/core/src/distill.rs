//! Affine distillation head mapping raw detector descriptors into the
//! vision-language embedding space, trained with an L1 loss on the
//! normalized output.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::{dot, norm, Matrix};
use crate::error::{Error, Result};
use crate::prototype::TrainConfig;

/// Raw descriptor and its target unit embedding.
pub type DistillPair<'a> = (&'a [f64], &'a [f64]);

#[derive(Debug, Clone, PartialEq)]
pub struct DistillHead {
    /// `d x d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DistillHead {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                expected: weight.rows(),
                found: bias.len(),
            });
        }
        if weight.as_slice().iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("distillation head has non-finite parameters"));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        let mut weight = Matrix::zeros(d, d);
        for i in 0..d {
            weight.row_mut(i)[i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; d],
        }
    }

    /// Gaussian weights with standard deviation `1/sqrt(d_in)`, zero bias.
    pub fn random(d: usize, d_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let data = (0..d * d_in).map(|_| normal.sample(&mut rng)).collect();
        Self {
            weight: Matrix::from_vec(d, d_in, data).expect("sized"),
            bias: vec![0.0; d],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, raw: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, raw) + b)
            .collect()
    }
}

/// `normalize(W * raw + b)`.
pub fn apply_head(h: &DistillHead, raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != h.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: h.input_dim(),
            found: raw.len(),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("raw descriptor is not finite"));
    }
    let y = h.pre_activation(raw);
    let n = norm(&y);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("distillation head output has zero norm"));
    }
    Ok(y.into_iter().map(|v| v / n).collect())
}

fn check_pairs(h: &DistillHead, pairs: &[DistillPair<'_>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("distillation needs at least one pair"));
    }
    for (_, target) in pairs {
        if target.len() != h.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: h.output_dim(),
                found: target.len(),
            });
        }
    }
    Ok(())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean over pairs of `||normalize(W raw + b) - target||_1`.
pub fn l1_distill_loss(h: &DistillHead, pairs: &[DistillPair<'_>]) -> Result<f64> {
    check_pairs(h, pairs)?;
    let mut total = 0.0;
    for (raw, target) in pairs {
        total += l1(&apply_head(h, raw)?, target);
    }
    Ok(total / pairs.len() as f64)
}

/// Subgradient of [`l1_distill_loss`] as `(dW, db)`, taking `sign(0) = 0`.
pub fn l1_distill_grad(h: &DistillHead, pairs: &[DistillPair<'_>]) -> Result<(Matrix, Vec<f64>)> {
    check_pairs(h, pairs)?;
    let d = h.output_dim();
    let mut gw = Matrix::zeros(d, h.input_dim());
    let mut gb = vec![0.0; d];
    let scale = 1.0 / pairs.len() as f64;
    for (raw, target) in pairs {
        let y = h.pre_activation(raw);
        let n = norm(&y);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("distillation head output has zero norm"));
        }
        let f: Vec<f64> = y.iter().map(|v| v / n).collect();
        let g: Vec<f64> = f
            .iter()
            .zip(target.iter())
            .map(|(a, b)| {
                let diff = a - b;
                if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        // d f / d y = (I - f f^T) / |y|
        let fg = dot(&f, &g);
        for i in 0..d {
            let dy = (g[i] - f[i] * fg) / n * scale;
            gb[i] += dy;
            for (w, x) in gw.row_mut(i).iter_mut().zip(raw.iter()) {
                *w += dy * x;
            }
        }
    }
    Ok((gw, gb))
}

/// Mini-batch subgradient descent; the trace holds the full-data loss before
/// training and after every epoch.
pub fn train_distill(
    h: &DistillHead,
    pairs: &[DistillPair<'_>],
    cfg: &TrainConfig,
) -> Result<(DistillHead, Vec<f64>)> {
    check_pairs(h, pairs)?;
    let mut head = h.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = vec![l1_distill_loss(&head, pairs)?];
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        if lr > 0.0 {
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<DistillPair<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
                let (gw, gb) = l1_distill_grad(&head, &batch)?;
                for (w, g) in head.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *w -= lr * g;
                }
                for (b, g) in head.bias.iter_mut().zip(&gb) {
                    *b -= lr * g;
                }
            }
        }
        trace.push(l1_distill_loss(&head, pairs)?);
    }
    Ok((head, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_head_passes_unit_vectors_through() {
        let h = DistillHead::identity(3);
        let raw = [0.6, 0.0, 0.8];
        assert_eq!(apply_head(&h, &raw).unwrap(), raw.to_vec());
    }

    #[test]
    fn output_is_scale_invariant_without_bias() {
        let h = DistillHead::random(4, 5, 1);
        let raw = [0.3, -1.0, 2.0, 0.5, 0.1];
        let scaled: Vec<f64> = raw.iter().map(|v| v * 7.5).collect();
        let a = apply_head(&h, &raw).unwrap();
        let b = apply_head(&h, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((norm(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_output_is_an_error() {
        let h = DistillHead::identity(2);
        assert!(apply_head(&h, &[0.0, 0.0]).is_err());
        assert!(apply_head(&h, &[1.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        let h = DistillHead::identity(2);
        let pairs: Vec<DistillPair<'_>> = vec![(&[1.0, 0.0], &[1.0, 0.0])];
        assert_eq!(l1_distill_loss(&h, &pairs).unwrap(), 0.0);
        let pairs: Vec<DistillPair<'_>> = vec![(&[1.0, 0.0], &[0.0, 1.0])];
        assert_eq!(l1_distill_loss(&h, &pairs).unwrap(), 2.0);
        assert!(l1_distill_loss(&h, &[]).is_err());
    }

    #[test]
    fn loss_ignores_pair_order() {
        let h = DistillHead::random(3, 3, 4);
        let a: (&[f64], &[f64]) = (&[1.0, 2.0, 0.5], &[0.0, 1.0, 0.0]);
        let b: (&[f64], &[f64]) = (&[-1.0, 0.2, 0.5], &[0.6, 0.0, 0.8]);
        let l1 = l1_distill_loss(&h, &[a, b]).unwrap();
        let l2 = l1_distill_loss(&h, &[b, a]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_head() {
        let h = DistillHead::random(3, 3, 2);
        let pairs: Vec<DistillPair<'_>> = vec![(&[1.0, 2.0, 0.5], &[0.0, 1.0, 0.0])];
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 4, ..Default::default() };
        let (out, trace) = train_distill(&h, &pairs, &cfg).unwrap();
        assert_eq!(out, h);
        assert_eq!(trace.len(), 5);
    }
}
