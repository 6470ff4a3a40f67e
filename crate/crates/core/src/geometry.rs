//! IoU, greedy one-to-one matching and per-class non-maximum suppression.
//!
//! Areas use the continuous `width * height` convention (no `+1` pixel term).

use std::cmp::Ordering;

use crate::model::{BBox, Detection, GroundTruthObject, ObjectClass};

/// Intersection over union in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Highest IoU of `b` against any of `others` (0 when `others` is empty).
pub fn max_iou<'a>(b: &BBox, others: impl IntoIterator<Item = &'a BBox>) -> f64 {
    others.into_iter().map(|o| iou(b, o)).fold(0.0, f64::max)
}

/// Indices ordered by descending confidence, ties by ascending index.
pub fn confidence_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&i, &j| {
        confidences[j]
            .partial_cmp(&confidences[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// For each detection (input order), the truth it was assigned to.
    pub detection_to_truth: Vec<Option<usize>>,
    pub truth_matched: Vec<bool>,
}

/// Greedy one-to-one matching.
///
/// Detections are visited by descending confidence (ties by index); each takes
/// the still-unmatched truth with the highest IoU, provided it reaches
/// `iou_threshold`. Equal IoUs resolve to the lowest truth index.
pub fn match_greedy(
    detections: &[BBox],
    confidences: &[f64],
    truths: &[BBox],
    iou_threshold: f64,
) -> Matching {
    assert_eq!(detections.len(), confidences.len());
    let mut detection_to_truth = vec![None; detections.len()];
    let mut truth_matched = vec![false; truths.len()];
    for d in confidence_order(confidences) {
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if truth_matched[t] {
                continue;
            }
            let o = iou(&detections[d], truth);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((t, o));
            }
        }
        if let Some((t, _)) = best {
            truth_matched[t] = true;
            detection_to_truth[d] = Some(t);
        }
    }
    Matching {
        detection_to_truth,
        truth_matched,
    }
}

/// [`match_greedy`] over detection and ground-truth records.
pub fn match_detections(
    detections: &[Detection],
    truths: &[GroundTruthObject],
    iou_threshold: f64,
) -> Matching {
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let conf: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
    let truth_boxes: Vec<BBox> = truths.iter().map(|t| *t.bbox()).collect();
    match_greedy(&boxes, &conf, &truth_boxes, iou_threshold)
}

/// Greedy suppression over an abstract overlap function. Returns kept indices
/// in ascending (input) order.
pub fn nms_indices<F>(
    confidences: &[f64],
    classes: &[ObjectClass],
    overlap: F,
    iou_threshold: f64,
) -> Vec<usize>
where
    F: Fn(usize, usize) -> f64,
{
    let mut suppressed = vec![false; confidences.len()];
    let mut kept = Vec::new();
    for i in confidence_order(confidences) {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for j in 0..confidences.len() {
            if j != i && !suppressed[j] && classes[j] == classes[i] && overlap(i, j) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept.sort_unstable();
    kept
}

/// Per-class non-maximum suppression; the output preserves input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let conf: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
    let classes: Vec<ObjectClass> = detections.iter().map(|d| d.class).collect();
    nms_indices(
        &conf,
        &classes,
        |i, j| iou(&detections[i].bbox, &detections[j].bbox),
        iou_threshold,
    )
    .into_iter()
    .map(|i| detections[i].clone())
    .collect()
}
