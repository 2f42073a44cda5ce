//! Attention-map normalization and informative-proposal selection.
//!
//! A raw attention grid is squashed with `sigmoid(lambda * a)` and then
//! shifted up by `max(1 - mean, 0)`, so that whenever the squashed map has
//! mean at most one the shifted mask has mean exactly one. A proposal is
//! informative when the bilinear-sampled mean of the mask over its box is at
//! least one, i.e. it sits on above-average attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Proposal, ProposalRole, ProposalSet};

/// Slack on the `>= 1` selection test so that masks which are exactly one in
/// real arithmetic are not rejected by rounding.
const SELECTION_EPS: f64 = 1e-12;

/// Row-major `rows x cols` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("attention grid must be at least 1x1"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention grid contains non-finite values"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear interpolation at fractional grid coordinates, clamped to the
    /// grid extent.
    pub fn bilinear(&self, gx: f64, gy: f64) -> f64 {
        let gx = gx.clamp(0.0, (self.cols - 1) as f64);
        let gy = gy.clamp(0.0, (self.rows - 1) as f64);
        let c0 = gx.floor() as usize;
        let r0 = gy.floor() as usize;
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let tx = gx - c0 as f64;
        let ty = gy - r0 as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let top = lerp(self.at(r0, c0), self.at(r0, c1), tx);
        let bottom = lerp(self.at(r1, c0), self.at(r1, c1), tx);
        lerp(top, bottom, ty)
    }
}

/// Raw encoder attention for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: Grid,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMask {
    pub grid: Grid,
    /// The applied `max(1 - mean, 0)`.
    pub shift: f64,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub scale_lambda: f64,
    pub sample_grid: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            scale_lambda: 10.0,
            sample_grid: 7,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lambda > 0.0 && self.scale_lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and > 0"));
        }
        if self.sample_grid == 0 {
            return Err(Error::config("sample_grid", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the adaptive shift to an already squashed map.
pub fn shift_mask(scaled: Grid, image_width: u32, image_height: u32) -> NormalizedMask {
    let shift = (1.0 - scaled.mean()).max(0.0);
    let data = scaled.data.iter().map(|v| v + shift).collect();
    NormalizedMask {
        grid: Grid {
            data,
            ..scaled
        },
        shift,
        image_width,
        image_height,
    }
}

pub fn normalize_attention(a: &AttentionMap, cfg: &AttentionConfig) -> NormalizedMask {
    let scaled = Grid {
        rows: a.grid.rows,
        cols: a.grid.cols,
        data: a
            .grid
            .data
            .iter()
            .map(|v| sigmoid(v * cfg.scale_lambda))
            .collect(),
    };
    shift_mask(scaled, a.image_width, a.image_height)
}

/// Align-corners mapping of one image coordinate onto the grid axis.
fn to_grid(v: f64, image_extent: u32, grid_extent: usize) -> f64 {
    if grid_extent <= 1 || image_extent <= 1 {
        return 0.0;
    }
    v * (grid_extent - 1) as f64 / (image_extent - 1) as f64
}

/// Mean of the mask over `b`, sampled on a `sample_grid x sample_grid`
/// lattice of cell centers inside the box.
pub fn region_mean(m: &NormalizedMask, b: &BBox, cfg: &AttentionConfig) -> f64 {
    let gx1 = to_grid(b.x1, m.image_width, m.grid.cols);
    let gx2 = to_grid(b.x2, m.image_width, m.grid.cols);
    let gy1 = to_grid(b.y1, m.image_height, m.grid.rows);
    let gy2 = to_grid(b.y2, m.image_height, m.grid.rows);
    if gx2 - gx1 <= 0.0 && gy2 - gy1 <= 0.0 {
        return m.grid.bilinear((gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0);
    }
    let n = cfg.sample_grid.max(1);
    let mut sum = 0.0;
    for i in 0..n {
        let gy = gy1 + (gy2 - gy1) * (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let gx = gx1 + (gx2 - gx1) * (j as f64 + 0.5) / n as f64;
            sum += m.grid.bilinear(gx, gy);
        }
    }
    sum / (n * n) as f64
}

pub fn is_informative(m: &NormalizedMask, b: &BBox, cfg: &AttentionConfig) -> bool {
    region_mean(m, b, cfg) >= 1.0 - SELECTION_EPS
}

/// Keeps the proposals whose region mean reaches one, in input order.
pub fn select_informative(
    p: &ProposalSet,
    m: &NormalizedMask,
    cfg: &AttentionConfig,
) -> ProposalSet {
    let kept: Vec<Proposal> = p
        .proposals
        .iter()
        .filter(|prop| is_informative(m, &prop.bbox, cfg))
        .cloned()
        .collect();
    ProposalSet::new(ProposalRole::Informative, kept)
}
