//! Unit-norm embeddings, cosine similarity and temperature softmax.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Rows are embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// `self * x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.iter_rows().map(|r| dot(r, x)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-length copy; errors on zero or non-finite vectors.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Cosine of two unit vectors, i.e. their dot product.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Softmax of `logits / tau` with max subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `exp(<q, b_t>/tau) / sum_j exp(<q, b_j>/tau)`.
pub fn softmax_prob<'a, I>(query: &[f64], bank: I, target_index: usize, tau: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let sims = bank
        .into_iter()
        .map(|row| cosine(query, row))
        .collect::<Result<Vec<f64>>>()?;
    if sims.is_empty() {
        return Err(Error::invalid("softmax bank is empty"));
    }
    if target_index >= sims.len() {
        return Err(Error::invalid(format!(
            "target index {target_index} out of range for bank of {}",
            sims.len()
        )));
    }
    Ok(softmax(&sims, tau)[target_index])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// VLM crop embedding of a proposal.
    Region,
    /// Detector-side region feature produced by the distillation head.
    RoiFeature,
    /// Raw detector descriptor fed to the distillation head.
    RawDescriptor,
    TextBase,
    TextNovel,
    ClusterCenter,
    Prototype,
    BaseClassifier,
    DistillHead,
}

impl EmbeddingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingKind::Region => "region",
            EmbeddingKind::RoiFeature => "roi_feature",
            EmbeddingKind::RawDescriptor => "raw_descriptor",
            EmbeddingKind::TextBase => "text_base",
            EmbeddingKind::TextNovel => "text_novel",
            EmbeddingKind::ClusterCenter => "cluster_center",
            EmbeddingKind::Prototype => "prototype",
            EmbeddingKind::BaseClassifier => "base_classifier",
            EmbeddingKind::DistillHead => "distill_head",
        }
    }

    /// Kinds whose rows are unit vectors and get re-normalized on ingestion.
    pub fn is_unit_norm(&self) -> bool {
        !matches!(
            self,
            EmbeddingKind::RawDescriptor | EmbeddingKind::DistillHead | EmbeddingKind::ClusterCenter
        )
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "region" => EmbeddingKind::Region,
            "roi_feature" => EmbeddingKind::RoiFeature,
            "raw_descriptor" => EmbeddingKind::RawDescriptor,
            "text_base" => EmbeddingKind::TextBase,
            "text_novel" => EmbeddingKind::TextNovel,
            "cluster_center" => EmbeddingKind::ClusterCenter,
            "prototype" => EmbeddingKind::Prototype,
            "base_classifier" => EmbeddingKind::BaseClassifier,
            "distill_head" => EmbeddingKind::DistillHead,
            other => return Err(Error::format("embedding kind", format!("unknown kind `{other}`"))),
        })
    }
}

/// Keyed set of embeddings of one kind, sharing a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub kind: EmbeddingKind,
    pub keys: Vec<String>,
    pub vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(kind: EmbeddingKind, keys: Vec<String>, vectors: Matrix) -> Result<Self> {
        if keys.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: vectors.rows(),
                found: keys.len(),
            });
        }
        Ok(Self { kind, keys, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Re-normalizes every row to unit length.
    pub fn renormalize(&mut self) -> Result<()> {
        for i in 0..self.vectors.rows() {
            normalize_in_place(self.vectors.row_mut(i)).map_err(|_| {
                Error::invalid(format!("embedding `{}` has zero norm", self.keys[i]))
            })?;
        }
        Ok(())
    }
}

/// Base, novel and latent unknown category names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpace {
    pub base: Vec<String>,
    pub novel: Vec<String>,
    pub k_unknown: usize,
}

impl CategorySpace {
    pub fn new(base: Vec<String>, novel: Vec<String>, k_unknown: usize) -> Result<Self> {
        if let Some(c) = base.iter().find(|c| novel.contains(c)) {
            return Err(Error::invalid(format!("class `{c}` is both base and novel")));
        }
        Ok(Self {
            base,
            novel,
            k_unknown,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.base.iter().chain(self.novel.iter())
    }

    pub fn is_base(&self, class: &str) -> bool {
        self.base.iter().any(|c| c == class)
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.novel.iter().any(|c| c == class)
    }

    pub fn unknown_name(j: usize) -> String {
        format!("unknown-{j}")
    }
}
