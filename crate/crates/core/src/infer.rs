//! Multi-score inference for novel classes.
//!
//! Every proposal gets a distillation score (softmax of its region feature
//! against the novel text embeddings), a prototype score (softmax against the
//! unknown-class prototypes matched to each novel class) and its objectness.
//! They are fused with two geometric means, `cls = sqrt(d * p)` and
//! `s = sqrt(l * cls)`, the proposal takes its best class, and class-wise
//! greedy NMS prunes duplicates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalized, softmax, Matrix};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{iou, Proposal};
use crate::prototype::{ClassifierBank, PrototypeBank};
use crate::pseudolabel::ClusterModel;

/// Which scores take part in the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreComponents {
    pub distill: bool,
    pub prototype: bool,
    pub objectness: bool,
}

impl ScoreComponents {
    pub const ALL: Self = Self {
        distill: true,
        prototype: true,
        objectness: true,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.distill {
            parts.push("d");
        }
        if self.prototype {
            parts.push("p");
        }
        if self.objectness {
            parts.push("l");
        }
        parts.join("+")
    }
}

impl Default for ScoreComponents {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub tau: f64,
    pub prototypes_per_class: usize,
    pub nms_iou: f64,
    pub max_detections_per_image: usize,
    /// Novel candidates whose background-prototype probability exceeds this
    /// are dropped.
    pub bg_threshold: f64,
    /// Use the literal `-log softmax` values as scores instead of the
    /// probabilities.
    pub score_neglog: bool,
    pub components: ScoreComponents,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            prototypes_per_class: 2,
            nms_iou: 0.5,
            max_detections_per_image: 100,
            bg_threshold: 0.5,
            score_neglog: false,
            components: ScoreComponents::ALL,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be finite and > 0"));
        }
        if self.prototypes_per_class == 0 {
            return Err(Error::config("prototypes_per_class", "must be >= 1"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config("nms_iou", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return Err(Error::config("bg_threshold", "must lie in [0, 1]"));
        }
        if !self.components.distill && !self.components.prototype {
            return Err(Error::config("components", "need the distillation or the prototype score"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub score_d: f64,
    pub score_p: f64,
    pub score_l: f64,
    pub score_cls: f64,
    pub score_s: f64,
    pub assigned_class: String,
    pub matched_prototypes: Vec<(usize, f64)>,
}

fn polarity(p: f64, neglog: bool) -> f64 {
    if neglog {
        -p.max(f64::MIN_POSITIVE).ln()
    } else {
        p
    }
}

/// Distillation score of `f_roi` for novel class `class_index`.
pub fn score_d(f_roi: &[f64], novel_text: &Matrix, class_index: usize, tau: f64) -> Result<f64> {
    if class_index >= novel_text.rows() {
        return Err(Error::invalid(format!("unknown novel class index {class_index}")));
    }
    let sims: Vec<f64> = novel_text.iter_rows().map(|t| dot(f_roi, t)).collect();
    Ok(softmax(&sims, tau)[class_index])
}

/// The `m` cluster centers most similar to `t_novel`, weighted by a softmax
/// (temperature 1) over those similarities. Ties go to the lowest index.
pub fn match_prototypes(t_novel: &[f64], cm: &ClusterModel, m: usize) -> Result<Vec<(usize, f64)>> {
    if m == 0 || m > cm.k {
        return Err(Error::invalid(format!("prototypes per class must lie in 1..={}", cm.k)));
    }
    let mut sims = Vec::with_capacity(cm.k);
    for (j, c) in cm.centers.iter_rows().enumerate() {
        sims.push((j, dot(t_novel, &normalized(c)?)));
    }
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(m);
    let weights = softmax(&sims.iter().map(|s| s.1).collect::<Vec<_>>(), 1.0);
    Ok(sims.iter().map(|s| s.0).zip(weights).collect())
}

/// `sum_i w_i * softmax(<f, u_j>/tau over the k unknown prototypes)[i]`.
pub fn score_p(f_roi: &[f64], bank: &PrototypeBank, matched: &[(usize, f64)], tau: f64) -> Result<f64> {
    score_p_with(f_roi, bank, matched, tau, false)
}

fn score_p_with(
    f_roi: &[f64],
    bank: &PrototypeBank,
    matched: &[(usize, f64)],
    tau: f64,
    neglog: bool,
) -> Result<f64> {
    if matched.is_empty() {
        return Err(Error::invalid("no matched prototypes"));
    }
    let sims: Vec<f64> = bank.unknown_rows().map(|u| dot(f_roi, u)).collect();
    let probs = softmax(&sims, tau);
    let mut total = 0.0;
    for &(j, w) in matched {
        let p = *probs
            .get(j)
            .ok_or_else(|| Error::invalid(format!("prototype index {j} out of range")))?;
        total += w * polarity(p, neglog);
    }
    Ok(total)
}

/// `(sqrt(d * p), sqrt(l * sqrt(d * p)))`.
pub fn fuse(score_d: f64, score_p: f64, score_l: f64) -> Result<(f64, f64)> {
    for (name, v) in [("score_d", score_d), ("score_p", score_p), ("score_l", score_l)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let cls = (score_d * score_p).sqrt();
    Ok((cls, (score_l * cls).sqrt()))
}

/// Fusion restricted to the enabled components.
pub fn fuse_components(score_d: f64, score_p: f64, score_l: f64, c: ScoreComponents) -> Result<(f64, f64)> {
    let (full_cls, _) = fuse(score_d, score_p, score_l)?;
    let cls = match (c.distill, c.prototype) {
        (true, true) => full_cls,
        (true, false) => score_d,
        (false, true) => score_p,
        (false, false) => return Err(Error::invalid("no classification score enabled")),
    };
    let s = if c.objectness { (score_l * cls).sqrt() } else { cls };
    Ok((cls, s))
}

/// Trained state needed at inference time.
#[derive(Debug, Clone)]
pub struct SmiModel {
    pub novel_names: Vec<String>,
    /// Unit text embeddings, one row per novel class.
    pub novel_text: Matrix,
    pub prototypes: PrototypeBank,
    /// Matched prototypes per novel class.
    pub matches: Vec<Vec<(usize, f64)>>,
    /// Base class names and classifier; proposals it assigns to a base class
    /// become base detections and are not scored as novel.
    pub base: Option<(Vec<String>, ClassifierBank)>,
}

impl SmiModel {
    pub fn new(
        novel_names: Vec<String>,
        novel_text: Matrix,
        prototypes: PrototypeBank,
        cm: &ClusterModel,
        base: Option<(Vec<String>, ClassifierBank)>,
        cfg: &InferenceConfig,
    ) -> Result<Self> {
        if novel_names.is_empty() || novel_names.len() != novel_text.rows() {
            return Err(Error::invalid("novel names and text embeddings must align and be non-empty"));
        }
        if prototypes.k() != cm.k {
            return Err(Error::DimensionMismatch {
                expected: cm.k,
                found: prototypes.k(),
            });
        }
        if let Some((names, bank)) = &base {
            if names.len() != bank.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: bank.num_classes(),
                    found: names.len(),
                });
            }
            if bank.rows.cols() != novel_text.cols() {
                return Err(Error::DimensionMismatch {
                    expected: novel_text.cols(),
                    found: bank.rows.cols(),
                });
            }
        }
        let m = cfg.prototypes_per_class.min(cm.k);
        let matches = novel_text
            .iter_rows()
            .map(|t| match_prototypes(t, cm, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            novel_names,
            novel_text,
            prototypes,
            matches,
            base,
        })
    }

    /// Base-classifier verdict: `Some((class, prob))` when a base class wins
    /// the open-vocabulary softmax over base text, novel text and the learned
    /// background row.
    pub fn base_verdict(&self, f_roi: &[f64], tau: f64) -> Option<(usize, f64)> {
        let (_, bank) = self.base.as_ref()?;
        let nb = bank.num_classes();
        let sims: Vec<f64> = bank
            .rows
            .iter_rows()
            .chain(self.novel_text.iter_rows())
            .map(|r| dot(f_roi, r))
            .collect();
        let probs = softmax(&sims, tau);
        let (best, &p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        (best < nb).then_some((best, p))
    }

    pub fn background_probability(&self, f_roi: &[f64], tau: f64) -> f64 {
        let sims: Vec<f64> = self.prototypes.prototypes.iter_rows().map(|u| dot(f_roi, u)).collect();
        softmax(&sims, tau)[self.prototypes.background_index()]
    }

    /// Scores every novel class for one proposal and returns the best one, or
    /// `None` when the background prototype claims the proposal.
    pub fn score_proposal(&self, f_roi: &[f64], score_l: f64, cfg: &InferenceConfig) -> Result<Option<ScoreBreakdown>> {
        let c = cfg.components;
        if c.prototype && self.background_probability(f_roi, cfg.tau) > cfg.bg_threshold {
            return Ok(None);
        }
        let d_all: Vec<f64> = {
            let sims: Vec<f64> = self.novel_text.iter_rows().map(|t| dot(f_roi, t)).collect();
            softmax(&sims, cfg.tau)
                .into_iter()
                .map(|p| polarity(p, cfg.score_neglog))
                .collect()
        };
        let mut best: Option<ScoreBreakdown> = None;
        for (ci, name) in self.novel_names.iter().enumerate() {
            let sd = d_all[ci];
            let sp = score_p_with(f_roi, &self.prototypes, &self.matches[ci], cfg.tau, cfg.score_neglog)?;
            let (cls, s) = fuse_components(sd, sp, score_l, c)?;
            if best.as_ref().is_none_or(|b| s > b.score_s) {
                best = Some(ScoreBreakdown {
                    score_d: sd,
                    score_p: sp,
                    score_l,
                    score_cls: cls,
                    score_s: s,
                    assigned_class: name.clone(),
                    matched_prototypes: self.matches[ci].clone(),
                });
            }
        }
        Ok(best)
    }
}

/// Greedy NMS over indices already sorted by descending score; suppresses
/// boxes whose IoU with a kept box exceeds `thresh`.
pub fn nms(dets: &[Detection], order: &[usize], thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

fn by_score(dets: &[Detection]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| dets[b].score_s.total_cmp(&dets[a].score_s).then(a.cmp(&b))
}

/// Detections for one image. `features[i]` is the region feature of
/// `proposals[i]`.
pub fn infer_image(
    proposals: &[Proposal],
    features: &[Vec<f64>],
    model: &SmiModel,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    if proposals.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: proposals.len(),
            found: features.len(),
        });
    }
    let mut candidates = Vec::new();
    for (p, f) in proposals.iter().zip(features) {
        if !(0.0..=1.0).contains(&p.objectness) {
            return Err(Error::invalid(format!(
                "proposal in `{}` has missing or out-of-range objectness {}",
                p.image_id, p.objectness
            )));
        }
        let l = p.objectness;
        if let Some((bi, prob)) = model.base_verdict(f, cfg.tau) {
            let names = &model.base.as_ref().expect("verdict implies base").0;
            let s = if cfg.components.objectness { (l * prob).sqrt() } else { prob };
            candidates.push(Detection {
                image_id: p.image_id.clone(),
                class: names[bi].clone(),
                bbox: p.bbox,
                score_s: s,
                score_d: prob,
                score_p: 0.0,
                score_l: l,
            });
            continue;
        }
        if let Some(b) = model.score_proposal(f, l, cfg)? {
            candidates.push(Detection {
                image_id: p.image_id.clone(),
                class: b.assigned_class,
                bbox: p.bbox,
                score_s: b.score_s,
                score_d: b.score_d,
                score_p: b.score_p,
                score_l: l,
            });
        }
    }

    let mut classes: Vec<&str> = candidates.iter().map(|d| d.class.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].class == class).collect();
        order.sort_by(by_score(&candidates));
        kept.extend(nms(&candidates, &order, cfg.nms_iou));
    }
    kept.sort_by(by_score(&candidates));
    kept.truncate(cfg.max_detections_per_image);
    Ok(kept.into_iter().map(|i| candidates[i].clone()).collect())
}
