//! Detection and retrieval metrics.
//!
//! Matching follows the greedy VOC protocol: detections are visited in score
//! order and each claims the best still-unmatched ground truth of the same
//! image and class at IoU ≥ threshold. AP integrates the all-points
//! precision envelope. Classes without ground truth are left out of mAP.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IOU: f64 = 0.5;

/// Axis-aligned box in pixels, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if [x_min, y_min, x_max, y_max].iter().any(|v| !v.is_finite())
            || !(x_min < x_max && y_min < y_max)
        {
            return Err(Error::Invalid(format!("invalid box {:?}", b.to_array())));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersection with `[0, w] x [0, h]`, if it has positive area.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(w),
            self.y_max.min(h),
        )
        .ok()
    }

    fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "image")]
    pub image_id: String,
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
}

/// Ground truth; deserializes from stamp records (extra fields ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "image")]
    pub image_id: String,
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: String,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Score descending, then box lexicographic, then input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then_with(|| dets[a].bbox.lex_cmp(&dets[b].bbox))
    });
    order
}

/// Greedy per-class non-maximum suppression. Output is in score order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    let mut by_class: HashMap<(&str, &str), Vec<BBox>> = HashMap::new();
    for i in score_order(detections) {
        let d = &detections[i];
        let boxes = by_class
            .entry((d.image_id.as_str(), d.class_id.as_str()))
            .or_default();
        if boxes.iter().all(|b| iou(b, &d.bbox) < iou_threshold) {
            boxes.push(d.bbox);
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// A detection after matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub index: usize,
    pub score: f64,
    pub true_positive: bool,
}

/// Labels every detection TP or FP, returned in evaluation (score) order.
pub fn match_detections(
    detections: &[Detection],
    truths: &[GroundTruth],
    iou_threshold: f64,
) -> Vec<Labeled> {
    let mut gt_by_key: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, g) in truths.iter().enumerate() {
        gt_by_key
            .entry((g.image_id.as_str(), g.class_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut used = vec![false; truths.len()];
    score_order(detections)
        .into_iter()
        .map(|i| {
            let d = &detections[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(cands) = gt_by_key.get(&(d.image_id.as_str(), d.class_id.as_str())) {
                for &g in cands {
                    if used[g] {
                        continue;
                    }
                    let o = iou(&d.bbox, &truths[g].bbox);
                    if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            Labeled {
                index: i,
                score: d.score,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall after each labeled detection (already in
/// score order).
pub fn pr_curve(labeled: &[Labeled], total_positives: usize) -> Result<Vec<PrPoint>> {
    if total_positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut tp = 0usize;
    Ok(labeled
        .iter()
        .enumerate()
        .map(|(i, l)| {
            tp += l.true_positive as usize;
            PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / total_positives as f64,
            }
        })
        .collect())
}

/// Area under the all-points precision envelope.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &prec) in points.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * prec;
            prev_recall = p.recall;
        }
    }
    ap
}

pub fn mean_ap(per_class: &BTreeMap<String, f64>) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    /// `[precision, recall]` pairs of the curve pooled over all classes.
    pub pr_points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_pr_points: Option<BTreeMap<String, Vec<[f64; 2]>>>,
}

/// Full evaluation: per-class AP over classes present in `truths`, their
/// mean, and the pooled curve.
pub fn evaluate(
    detections: &[Detection],
    truths: &[GroundTruth],
    iou_threshold: f64,
    per_class_curves: bool,
) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::NoPositives);
    }
    let labeled = match_detections(detections, truths, iou_threshold);
    let mut gt_count: BTreeMap<&str, usize> = BTreeMap::new();
    for g in truths {
        *gt_count.entry(g.class_id.as_str()).or_default() += 1;
    }
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_pr = BTreeMap::new();
    for (&class, &n) in &gt_count {
        let mine: Vec<Labeled> = labeled
            .iter()
            .filter(|l| detections[l.index].class_id == class)
            .cloned()
            .collect();
        let curve = pr_curve(&mine, n)?;
        per_class_ap.insert(class.to_string(), average_precision(&curve));
        if per_class_curves {
            per_class_pr.insert(
                class.to_string(),
                curve.iter().map(|p| [p.precision, p.recall]).collect(),
            );
        }
    }
    let pooled = pr_curve(&labeled, truths.len())?;
    Ok(EvalReport {
        map: mean_ap(&per_class_ap),
        per_class_ap,
        pr_points: pooled.iter().map(|p| [p.precision, p.recall]).collect(),
        per_class_pr_points: per_class_curves.then_some(per_class_pr),
    })
}

/// Fraction of queries whose true class is among the first `k` distinct
/// classes of its ranking.
pub fn recall_at_k<S: AsRef<str>>(rankings: &[Vec<S>], truth: &[S], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if rankings.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: rankings.len(),
            got: truth.len(),
        });
    }
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(ranked, t)| {
            let mut distinct: Vec<&str> = Vec::with_capacity(k);
            for c in ranked.iter() {
                let c = c.as_ref();
                if !distinct.contains(&c) {
                    distinct.push(c);
                    if distinct.len() == k {
                        break;
                    }
                }
            }
            distinct.contains(&t.as_ref())
        })
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}
