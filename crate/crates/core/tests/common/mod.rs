//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vkdet::attention::Grid;
use vkdet::eval::{Detection, GroundTruth};
use vkdet::geometry::BBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Plain IoU, written out again so the AP oracle shares no code with the
/// evaluator.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP by enumerating the precision-recall point of every ranked prefix.
/// Greedy matching is replayed from scratch for each prefix.
pub fn naive_ap(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| b.score_s.partial_cmp(&a.score_s).unwrap());
    let mut points = Vec::new();
    for cut in 1..=ranked.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0usize;
        for d in &ranked[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id {
                    continue;
                }
                let v = box_iou(&g.bbox, &d.bbox);
                if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / cut as f64, tp as f64 / gts.len() as f64));
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for i in 0..points.len() {
        let recall = points[i].1;
        if recall > last_recall {
            let best_precision = points[i..].iter().map(|p| p.0).fold(0.0, f64::max);
            ap += (recall - last_recall) * best_precision;
            last_recall = recall;
        }
    }
    Some(ap)
}

/// Random single-class scenario over a few images: ground truth plus a mix
/// of near-duplicates, loose boxes and clutter with distinct scores.
pub fn ap_scenario(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=4);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0.0..80.0);
        let y = rng.random_range(0.0..80.0);
        BBox::new(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0)).unwrap()
    };
    for im in 0..images {
        let id = format!("im{im}");
        for _ in 0..rng.random_range(0..=4) {
            gts.push(GroundTruth {
                image_id: id.clone(),
                bbox: rand_box(rng),
                class: "c".into(),
            });
        }
    }
    for im in 0..images {
        let id = format!("im{im}");
        let own: Vec<BBox> = gts.iter().filter(|g| g.image_id == id).map(|g| g.bbox).collect();
        for _ in 0..rng.random_range(0..=7) {
            let bbox = if !own.is_empty() && rng.random_bool(0.6) {
                let g = own[rng.random_range(0..own.len())];
                let s = rng.random_range(0.0..0.4) * (g.x2 - g.x1);
                let dx = rng.random_range(-s..=s);
                let dy = rng.random_range(-s..=s);
                BBox::new(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy).unwrap()
            } else {
                rand_box(rng)
            };
            dets.push(Detection {
                image_id: id.clone(),
                class: "c".into(),
                bbox,
                score_s: rng.random::<f64>(),
                score_d: 0.0,
                score_p: 0.0,
                score_l: 0.0,
            });
        }
    }
    (dets, gts)
}

/// Largest number of points on which `pred` agrees with `truth` under some
/// bijection of labels, by exhaustive search over assignments (subset DP).
pub fn best_matching(truth: &[usize], pred: &[usize], k: usize) -> usize {
    assert!(k <= 24, "exhaustive matching is exponential in k");
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        counts[t][p] += 1;
    }
    // dp[mask]: best total after assigning truth labels 0..popcount(mask)
    // to the predicted labels in mask
    let mut dp = vec![0usize; 1 << k];
    let mut reached = vec![false; 1 << k];
    reached[0] = true;
    for mask in 0usize..(1 << k) {
        if !reached[mask] {
            continue;
        }
        let t = mask.count_ones() as usize;
        if t == k {
            continue;
        }
        for p in 0..k {
            if mask & (1 << p) == 0 {
                let next = mask | (1 << p);
                let v = dp[mask] + counts[t][p];
                if !reached[next] || v > dp[next] {
                    dp[next] = v;
                    reached[next] = true;
                }
            }
        }
    }
    dp[(1 << k) - 1]
}

/// The same quantity by enumerating every permutation; only for small k.
pub fn best_permutation(truth: &[usize], pred: &[usize], k: usize) -> usize {
    fn permute(perm: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
        if i == perm.len() {
            f(perm);
            return;
        }
        for j in i..perm.len() {
            perm.swap(i, j);
            permute(perm, i + 1, f);
            perm.swap(i, j);
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = truth.iter().zip(pred).filter(|(t, q)| p[**t] == **q).count();
        best = best.max(hits);
    });
    best
}

/// `k` Gaussian clusters in `d` dimensions whose centers are at least
/// `ratio` times the largest point-to-center distance apart.
pub fn planted_clusters(rng: &mut ChaCha8Rng, k: usize, per: usize, d: usize, ratio: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let offsets: Vec<Vec<f64>> = (0..k * per).map(|_| gaussian(rng, d)).collect();
    let spread = offsets
        .iter()
        .map(|o| o.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    // axis-aligned centers, pairwise distance scale * sqrt(2)
    assert!(d >= k);
    let scale = ratio * spread / 2f64.sqrt();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, o) in offsets.into_iter().enumerate() {
        let c = i % k;
        let mut p = o;
        p[c] += scale;
        points.push(p);
        labels.push(c);
    }
    (points, labels)
}

/// Mean of the bilinear interpolant of `grid` over the grid-coordinate box
/// `[gx1, gx2] x [gy1, gy2]`, integrated exactly: the interpolant is bilinear
/// on every cell, where 2-point Gauss-Legendre quadrature is exact.
pub fn exact_region_mean(grid: &Grid, gx1: f64, gx2: f64, gy1: f64, gy2: f64) -> f64 {
    let value = |x: f64, y: f64| {
        let c0 = (x.floor() as usize).min(grid.cols - 2);
        let r0 = (y.floor() as usize).min(grid.rows - 2);
        let (tx, ty) = (x - c0 as f64, y - r0 as f64);
        let g = |r: usize, c: usize| grid.data[r * grid.cols + c];
        g(r0, c0) * (1.0 - tx) * (1.0 - ty)
            + g(r0, c0 + 1) * tx * (1.0 - ty)
            + g(r0 + 1, c0) * (1.0 - tx) * ty
            + g(r0 + 1, c0 + 1) * tx * ty
    };
    let pieces = |a: f64, b: f64| {
        let mut cuts = vec![a];
        let mut t = a.floor() + 1.0;
        while t < b {
            cuts.push(t);
            t += 1.0;
        }
        cuts.push(b);
        cuts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
    };
    let node = 1.0 / 3f64.sqrt();
    let mut total = 0.0;
    for (xa, xb) in pieces(gx1, gx2) {
        for (ya, yb) in pieces(gy1, gy2) {
            let (mx, hx) = ((xa + xb) / 2.0, (xb - xa) / 2.0);
            let (my, hy) = ((ya + yb) / 2.0, (yb - ya) / 2.0);
            let mut s = 0.0;
            for sx in [-node, node] {
                for sy in [-node, node] {
                    s += value(mx + sx * hx, my + sy * hy);
                }
            }
            total += s * hx * hy;
        }
    }
    total / ((gx2 - gx1) * (gy2 - gy1))
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
