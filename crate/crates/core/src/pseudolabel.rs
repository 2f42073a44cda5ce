//! Unsupervised pseudo-label generation: drop proposals that cover annotated
//! base objects, cluster the remaining region embeddings, and keep the
//! closest members of every cluster as `unknown-j` training samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance, EmbeddingTable, Matrix};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{iou, ProposalSet};

/// IoU above which a proposal is considered to cover a base object.
pub const BASE_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: ProposalSet,
    /// Indices into the input set, ascending.
    pub kept_indices: Vec<usize>,
    pub removed_indices: Vec<usize>,
}

/// Removes every proposal whose center lies inside a base ground-truth box
/// of the same image, or whose IoU with one exceeds 0.5.
pub fn filter_base(p_aug: &ProposalSet, gt_base: &[GroundTruth]) -> FilterOutcome {
    let mut kept = Vec::new();
    let mut kept_indices = Vec::new();
    let mut removed_indices = Vec::new();
    for (i, p) in p_aug.proposals.iter().enumerate() {
        let (cx, cy) = p.bbox.center();
        let covers_base = gt_base.iter().any(|g| {
            g.image_id == p.image_id
                && (g.bbox.contains_point(cx, cy) || iou(&g.bbox, &p.bbox) > BASE_IOU_THRESHOLD)
        });
        if covers_base {
            removed_indices.push(i);
        } else {
            kept.push(p.clone());
            kept_indices.push(i);
        }
    }
    FilterOutcome {
        kept: ProposalSet::new(p_aug.role, kept),
        kept_indices,
        removed_indices,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k x d` cluster means (not unit-normalized).
    pub centers: Matrix,
    pub k: usize,
    /// Sum of squared distances to the assigned center under `centers`.
    pub inertia: f64,
    /// Inertia after every assignment step, in iteration order.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the largest center movement drops below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 20,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Index and squared distance of the nearest center; ties go to the lowest
/// index.
pub fn nearest_center(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centers: &Matrix) -> Vec<(usize, f64)> {
    points.par_iter().map(|p| nearest_center(p, centers)).collect()
}

/// D^2-weighted draw of one point index; uniform when every weight is zero.
fn draw_weighted(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = dist.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..dist.len());
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in dist.iter().enumerate() {
        acc += w;
        if acc > target && *w > 0.0 {
            return i;
        }
    }
    dist.iter().rposition(|w| *w > 0.0).unwrap_or(dist.len() - 1)
}

/// Greedy k-means++: each step draws `2 + ln k` candidates and keeps the one
/// that lowers the total potential most.
fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let d = points[0].len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Matrix::zeros(k, d);
    let first = rng.random_range(0..points.len());
    centers.row_mut(0).copy_from_slice(points[first]);
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, centers.row(0)))
        .collect();
    for c in 1..k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = draw_weighted(&dist, rng);
            let updated: Vec<f64> = points
                .par_iter()
                .zip(dist.par_iter())
                .map(|(p, &old)| old.min(squared_distance(p, points[cand])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        centers.row_mut(c).copy_from_slice(points[pick]);
        dist = updated;
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster left empty after an assignment step is re-seeded at the point
/// farthest from its own center. The center update sums points in input
/// order, so the result does not depend on the rayon worker count.
pub fn kmeans(points: &[&[f64]], params: &KMeansParams) -> Result<ClusterModel> {
    let k = params.k;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: p.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers = kmeans_plus_plus(points, k, &mut rng);
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        iterations += 1;
        let assignment = assign(points, &centers);
        inertia_trace.push(assignment.iter().map(|a| a.1).sum());

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums.row_mut(j).iter_mut().zip(p.iter()) {
                *s += x;
            }
        }

        let mut taken = vec![false; points.len()];
        let mut new_centers = Matrix::zeros(k, d);
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in new_centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            } else {
                let far = assignment
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                new_centers.row_mut(j).copy_from_slice(points[far]);
            }
        }

        let movement = (0..k)
            .map(|j| squared_distance(centers.row(j), new_centers.row(j)).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        if movement < params.tol {
            break;
        }
    }

    let inertia = assign(points, &centers).iter().map(|a| a.1).sum();
    Ok(ClusterModel {
        centers,
        k,
        inertia,
        inertia_trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub proposal_id: String,
    /// 1-based `unknown-j` index.
    pub unknown_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    /// Grouped by class in ascending class order, each group sorted by
    /// distance.
    pub records: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Assigns every embedding to its nearest center, then keeps the `n`
/// closest members of each center.
pub fn select_top_n(cm: &ClusterModel, embeddings: &EmbeddingTable, n: usize) -> Result<PseudoLabelSet> {
    if n == 0 {
        return Err(Error::invalid("top-n must be >= 1"));
    }
    if embeddings.dim() != cm.centers.cols() {
        return Err(Error::DimensionMismatch {
            expected: cm.centers.cols(),
            found: embeddings.dim(),
        });
    }
    let points: Vec<&[f64]> = embeddings.vectors.iter_rows().collect();
    let assignment = assign(&points, &cm.centers);
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cm.k];
    for (i, (j, d2)) in assignment.into_iter().enumerate() {
        members[j].push((i, d2.sqrt()));
    }
    let mut records = Vec::new();
    for (j, mut list) in members.into_iter().enumerate() {
        list.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        records.extend(list.into_iter().take(n).map(|(i, distance)| PseudoLabel {
            proposal_id: embeddings.keys[i].clone(),
            unknown_index: j + 1,
            distance,
        }));
    }
    Ok(PseudoLabelSet { records })
}
