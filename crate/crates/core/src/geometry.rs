//! Axis-aligned boxes, IoU, aspect-ratio classification and the max-min edge
//! jitter augmenter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in pixel coordinates, `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!(
                "degenerate or non-finite box ({x1}, {y1}, {x2}, {y2})"
            )))
        }
    }

    /// Square of side `side` centered on `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, side: f64) -> Self {
        let half = side / 2.0;
        Self {
            x1: cx - half,
            y1: cy - half,
            x2: cx + half,
            y2: cy + half,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn shorter_side(&self) -> f64 {
        self.width().min(self.height())
    }

    /// `max(w/h, h/w)`, always `>= 1`.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        (w / h).max(h / w)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clip corners to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectClass {
    Regular,
    Extreme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Log aspect-ratio threshold above which a box counts as extreme.
    pub alpha_log_ratio: f64,
    pub sigma_jitter: f64,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            alpha_log_ratio: std::f64::consts::LN_2,
            sigma_jitter: 0.15,
            seed: 0,
            image_width: 512,
            image_height: 512,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_log_ratio > 0.0 && self.alpha_log_ratio.is_finite()) {
            return Err(Error::config("alpha", "must be finite and > 0"));
        }
        if !(self.sigma_jitter >= 0.0 && self.sigma_jitter.is_finite()) {
            return Err(Error::config("sigma_jitter", "must be finite and >= 0"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::config("image size", "must be positive"));
        }
        Ok(())
    }
}

pub fn classify_aspect(b: &BBox, cfg: &JitterConfig) -> AspectClass {
    if b.aspect_ratio().ln() > cfg.alpha_log_ratio {
        AspectClass::Extreme
    } else {
        AspectClass::Regular
    }
}

/// Pre-clip square for longer-side jitter: side `l + sigma * s * eps`.
pub fn longer_side_square(b: &BBox, cfg: &JitterConfig, eps: f64) -> BBox {
    let side = b.longer_side() + cfg.sigma_jitter * b.shorter_side() * eps;
    let (cx, cy) = b.center();
    BBox::square(cx, cy, side)
}

/// Pre-clip square for shorter-side jitter: side `s + sigma * l * eps`.
pub fn shorter_side_square(b: &BBox, cfg: &JitterConfig, eps: f64) -> BBox {
    let side = b.shorter_side() + cfg.sigma_jitter * b.longer_side() * eps;
    let (cx, cy) = b.center();
    BBox::square(cx, cy, side)
}

fn clamp_and_clip(square: BBox, cfg: &JitterConfig) -> BBox {
    let (cx, cy) = square.center();
    let side = square.width().max(1.0);
    let clamped = BBox::square(cx, cy, side);
    let clipped = clamped.clip(cfg.image_width as f64, cfg.image_height as f64);
    if clipped.is_valid() {
        clipped
    } else {
        // centroid outside the image; nothing sensible to clip to
        clamped
    }
}

pub fn jitter_longer(b: &BBox, cfg: &JitterConfig, eps: f64) -> BBox {
    clamp_and_clip(longer_side_square(b, cfg, eps), cfg)
}

pub fn jitter_shorter(b: &BBox, cfg: &JitterConfig, eps: f64) -> BBox {
    clamp_and_clip(shorter_side_square(b, cfg, eps), cfg)
}

/// Where a proposal set sits in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalRole {
    Raw,
    Informative,
    Augmented,
    PseudoLabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: String,
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub role: ProposalRole,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(role: ProposalRole, proposals: Vec<Proposal>) -> Self {
        Self { role, proposals }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Stable per-file key `image_id:ordinal`, where the ordinal counts
    /// proposals of the same image in file order.
    pub fn keys(&self) -> Vec<String> {
        let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        self.proposals
            .iter()
            .map(|p| {
                let n = seen.entry(p.image_id.as_str()).or_insert(0);
                let key = proposal_key(&p.image_id, *n);
                *n += 1;
                key
            })
            .collect()
    }
}

pub fn proposal_key(image_id: &str, ordinal: usize) -> String {
    format!("{image_id}:{ordinal}")
}

/// Keeps every original and, after each extreme proposal, appends one
/// longer-side and one shorter-side jitter. Two standard-normal draws per
/// extreme proposal come from a ChaCha8 stream seeded with `cfg.seed`.
pub fn augment_proposals(p_inf: &ProposalSet, cfg: &JitterConfig) -> ProposalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(p_inf.len());
    for p in &p_inf.proposals {
        out.push(p.clone());
        if classify_aspect(&p.bbox, cfg) == AspectClass::Extreme {
            let eps_l: f64 = StandardNormal.sample(&mut rng);
            let eps_s: f64 = StandardNormal.sample(&mut rng);
            for bbox in [
                jitter_longer(&p.bbox, cfg, eps_l),
                jitter_shorter(&p.bbox, cfg, eps_s),
            ] {
                out.push(Proposal {
                    image_id: p.image_id.clone(),
                    bbox,
                    objectness: p.objectness,
                });
            }
        }
    }
    ProposalSet::new(ProposalRole::Augmented, out)
}
