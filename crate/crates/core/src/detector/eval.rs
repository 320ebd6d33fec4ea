use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::{decode, Detection};
use super::model::DetectorModel;
use super::train::PreparedScene;
use crate::synthdata::GroundTruthBox;
use crate::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// AP per class id, for classes with at least one ground-truth box.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean of `per_class_ap`.
    pub map: f64,
}

impl MapResult {
    /// Mean AP restricted to `classes`; classes without ground truth are
    /// skipped. Zero when nothing remains.
    pub fn map_over(&self, classes: impl IntoIterator<Item = usize>) -> f64 {
        let aps: Vec<f64> = classes
            .into_iter()
            .filter_map(|c| self.per_class_ap.get(&c).copied())
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

/// All-points interpolated AP of a ranked list of true/false positives.
/// `ranked` must already be sorted by descending score.
pub fn average_precision(ranked: &[bool], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (i, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_ground_truth as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope, right to left.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Content-only ordering so results do not depend on image order.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Per-class AP with greedy matching at `iou_threshold`: each detection,
/// in descending confidence, claims the unmatched ground-truth box of its
/// class with highest IoU, if that IoU reaches the threshold.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    iou_threshold: f64,
) -> MapResult {
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for boxes in ground_truth {
        for b in boxes {
            *gt_count.entry(b.class_id).or_default() += 1;
        }
    }
    let mut per_class_ap = BTreeMap::new();
    for (&class, &count) in &gt_count {
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, dets)| dets.iter().map(move |d| (img, d)))
            .filter(|(_, d)| d.class_id() == class)
            .collect();
        ranked.sort_by(|a, b| rank_order(a.1, b.1));
        let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for (img, det) in ranked {
            let mut best: Option<(usize, f64)> = None;
            if let Some(boxes) = ground_truth.get(img) {
                for (gi, gt) in boxes.iter().enumerate() {
                    if gt.class_id != class || matched[img][gi] {
                        continue;
                    }
                    let iou = det.bbox.iou(&gt.bbox());
                    if best.is_none_or(|(_, v)| iou > v) {
                        best = Some((gi, iou));
                    }
                }
            }
            match best {
                Some((gi, iou)) if iou >= iou_threshold => {
                    matched[img][gi] = true;
                    hits.push(true);
                }
                _ => hits.push(false),
            }
        }
        per_class_ap.insert(class, average_precision(&hits, count));
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    MapResult { per_class_ap, map }
}

/// Runs the model over prepared test scenes with its own decoding
/// thresholds and scores the detections.
pub fn evaluate_map(model: &DetectorModel, test: &[PreparedScene], iou_threshold: f64) -> Result<MapResult> {
    let config = model.config();
    let mut detections = Vec::with_capacity(test.len());
    for scene in test {
        let out = model.forward_features(&scene.features)?;
        detections.push(decode(&out, config.confidence_threshold, config.nms_iou));
    }
    let gt: Vec<Vec<GroundTruthBox>> = test.iter().map(|s| s.boxes.clone()).collect();
    Ok(evaluate_detections(&detections, &gt, iou_threshold))
}
