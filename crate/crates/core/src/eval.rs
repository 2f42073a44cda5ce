//! VOC-style AP@0.5 with all-point interpolation, base/novel/all means and
//! their harmonic mean.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::CategorySpace;
use crate::geometry::{iou, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: String,
    pub bbox: BBox,
    pub score_s: f64,
    pub score_d: f64,
    pub score_p: f64,
    pub score_l: f64,
}

/// Descending score, then image and box, so that ranking never depends on
/// input order.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score_s
        .total_cmp(&a.score_s)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.x1.total_cmp(&b.bbox.x1))
        .then_with(|| a.bbox.y1.total_cmp(&b.bbox.y1))
        .then_with(|| a.bbox.x2.total_cmp(&b.bbox.x2))
        .then_with(|| a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Whether each ranked detection is a true positive. Each detection takes the
/// unmatched ground truth of its image with the highest IoU at or above the
/// threshold.
pub fn match_detections(ranked: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<(usize, &GroundTruth)>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push((i, g));
    }
    let mut matched = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let Some(candidates) = by_image.get(d.image_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &(i, g) in candidates {
                if matched[i] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, _)) => {
                    matched[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP for one class; `None` when there is no ground
/// truth.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.to_vec();
    ranked.sort_by(|a, b| detection_order(a, b));
    let tp = match_detections(&ranked, gts, iou_thresh);

    let npos = gts.len() as f64;
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut tps, mut fps) = (0usize, 0usize);
    for hit in tp {
        if hit {
            tps += 1;
        } else {
            fps += 1;
        }
        recall.push(tps as f64 / npos);
        precision.push(tps as f64 / (tps + fps) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

/// `2 B N / (B + N)`, zero when both are zero.
pub fn harmonic_mean(map_base: f64, map_novel: f64) -> f64 {
    let s = map_base + map_novel;
    if s <= 0.0 {
        0.0
    } else {
        2.0 * map_base * map_novel / s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
    pub hm: f64,
}

fn mean_defined<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> f64 {
    let defined: Vec<f64> = values.flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], space: &CategorySpace) -> EvalReport {
    let mut per_class_ap = BTreeMap::new();
    for class in space.all() {
        let cd: Vec<&Detection> = dets.iter().filter(|d| &d.class == class).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| &g.class == class).collect();
        per_class_ap.insert(class.clone(), average_precision(&cd, &cg, DEFAULT_IOU_THRESHOLD));
    }
    let map_base = mean_defined(space.base.iter().map(|c| &per_class_ap[c]));
    let map_novel = mean_defined(space.novel.iter().map(|c| &per_class_ap[c]));
    let map_all = mean_defined(per_class_ap.values());
    EvalReport {
        hm: harmonic_mean(map_base, map_novel),
        per_class_ap,
        map_base,
        map_novel,
        map_all,
    }
}

impl EvalReport {
    /// One-row text table with N, B, A and HM reported x100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>8} {:>8} {:>8} {:>8}\n", "N", "B", "A", "HM"));
        out.push_str(&format!(
            "{:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
            self.map_novel * 100.0,
            self.map_base * 100.0,
            self.map_all * 100.0,
            self.hm * 100.0
        ));
        out.push('\n');
        for (class, ap) in &self.per_class_ap {
            match ap {
                Some(v) => out.push_str(&format!("{class:<16} {:>8.1}\n", v * 100.0)),
                None => out.push_str(&format!("{class:<16} {:>8}\n", "-")),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: &str, b: (f64, f64, f64, f64), class: &str) -> GroundTruth {
        GroundTruth {
            image_id: image.into(),
            bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
            class: class.into(),
        }
    }

    fn det(image: &str, b: (f64, f64, f64, f64), class: &str, score: f64) -> Detection {
        Detection {
            image_id: image.into(),
            class: class.into(),
            bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
            score_s: score,
            score_d: score,
            score_p: score,
            score_l: score,
        }
    }

    #[test]
    fn single_exact_detection() {
        let g = gt("a", (0.0, 0.0, 10.0, 10.0), "ship");
        let d = det("a", (0.0, 0.0, 10.0, 10.0), "ship", 0.9);
        assert_eq!(average_precision(&[&d], &[&g], 0.5), Some(1.0));
    }

    #[test]
    fn low_overlap_is_a_miss() {
        let g = gt("a", (0.0, 0.0, 10.0, 10.0), "ship");
        // IoU = 50 / 150
        let d = det("a", (5.0, 0.0, 15.0, 10.0), "ship", 0.9);
        assert_eq!(average_precision(&[&d], &[&g], 0.5), Some(0.0));
        assert_eq!(average_precision(&[&d], &[], 0.5), None);
    }

    #[test]
    fn tp_fp_tp() {
        let g1 = gt("a", (0.0, 0.0, 10.0, 10.0), "c");
        let g2 = gt("a", (50.0, 50.0, 60.0, 60.0), "c");
        let d1 = det("a", (0.0, 0.0, 10.0, 10.0), "c", 0.9);
        let d2 = det("a", (100.0, 100.0, 110.0, 110.0), "c", 0.8);
        let d3 = det("a", (50.0, 50.0, 60.0, 60.0), "c", 0.7);
        // precision 1 up to recall 0.5, then 2/3 at recall 1
        let ap = average_precision(&[&d1, &d2, &d3], &[&g1, &g2], 0.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_counts_once() {
        let g = gt("a", (0.0, 0.0, 10.0, 10.0), "c");
        let d1 = det("a", (0.0, 0.0, 10.0, 10.0), "c", 0.9);
        let d2 = det("a", (0.0, 0.0, 10.0, 10.0), "c", 0.8);
        let tp = match_detections(&[&d1, &d2], &[&g], 0.5);
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn hm_examples() {
        assert!((harmonic_mean(64.4, 30.1) - 41.0).abs() < 0.05);
        assert!((harmonic_mean(62.0, 23.3) - 33.9).abs() < 0.05);
        assert!((harmonic_mean(37.0, 37.0) - 37.0).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    fn space() -> CategorySpace {
        CategorySpace::new(vec!["b1".into()], vec!["n1".into(), "n2".into()], 4).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            gt("a", (0.0, 0.0, 10.0, 10.0), "b1"),
            gt("a", (20.0, 20.0, 30.0, 30.0), "n1"),
            gt("b", (0.0, 0.0, 10.0, 10.0), "n2"),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.image_id, (g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2), &g.class, 0.9))
            .collect();
        let r = evaluate(&dets, &gts, &space());
        assert_eq!((r.map_base, r.map_novel, r.map_all, r.hm), (1.0, 1.0, 1.0, 1.0));
        assert!(r.to_table().contains("100.0"));
    }

    #[test]
    fn missing_novel_detections() {
        let gts = vec![
            gt("a", (0.0, 0.0, 10.0, 10.0), "b1"),
            gt("a", (20.0, 20.0, 30.0, 30.0), "n1"),
        ];
        let dets = vec![det("a", (0.0, 0.0, 10.0, 10.0), "b1", 0.9)];
        let r = evaluate(&dets, &gts, &space());
        assert_eq!(r.map_novel, 0.0);
        assert_eq!(r.hm, 0.0);
        assert_eq!(r.per_class_ap["n2"], None);
        assert_eq!(r.map_base, 1.0);
    }
}
