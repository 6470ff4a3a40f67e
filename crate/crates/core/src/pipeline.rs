//! Inference over a split and evaluation of the resulting detections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::iou;
use crate::metrics::{
    avg_obj, build_report, confusion_counts, ClassAp, ClassEvidence, ConfusionCounts,
    EvaluationReport, PrPoint,
};
use crate::model::{Detection, LabelSpace, ObjectClass};
use crate::rejection::{apply_rejection, RejectionConfig};
use crate::sim::{gradient_oracle, score_image, ImageRecord, ToyDetector, TrainingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

/// Scores every region and applies the rejection strategy, image by image.
pub fn detect(
    detector: &ToyDetector,
    images: &[ImageRecord],
    rejection: &RejectionConfig,
) -> Result<Vec<ImageDetections>> {
    rejection.validate()?;
    let oracle = gradient_oracle(detector);
    let tau = detector.tau_obj.map(|t| t.value);
    images
        .par_iter()
        .map(|img| {
            let proposals = score_image(detector, img)?;
            let detections =
                apply_rejection(&proposals, &detector.label_space, rejection, &oracle, tau)?;
            Ok(ImageDetections {
                image_id: img.image_id,
                detections,
            })
        })
        .collect()
}

/// Objectness of regions covering a known truth and of regions covering an
/// unknown truth (IoU at or above `iou_threshold`).
pub fn objectness_by_truth_kind(
    detector: &ToyDetector,
    images: &[ImageRecord],
    iou_threshold: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = images
        .par_iter()
        .map(|img| {
            let mut known = Vec::new();
            let mut unknown = Vec::new();
            for r in &img.regions {
                let covering = img
                    .truths
                    .iter()
                    .filter(|t| iou(&r.bbox, t.bbox()) >= iou_threshold);
                let (mut k, mut u) = (false, false);
                for t in covering {
                    if t.class().is_unknown() {
                        u = true;
                    } else {
                        k = true;
                    }
                }
                if k || u {
                    let w = detector.objectness_forward(&r.features)?;
                    if k {
                        known.push(w);
                    }
                    if u {
                        unknown.push(w);
                    }
                }
            }
            Ok((known, unknown))
        })
        .collect::<Result<_>>()?;
    Ok(per_image
        .into_iter()
        .fold((Vec::new(), Vec::new()), |(mut k, mut u), (ik, iu)| {
            k.extend(ik);
            u.extend(iu);
            (k, u)
        }))
}

/// Per-known-class evidence gathered across images.
pub fn class_evidence(
    space: &LabelSpace,
    images: &[ImageRecord],
    detections: &[ImageDetections],
) -> Vec<ClassEvidence> {
    let mut evidence = vec![ClassEvidence::default(); space.num_known()];
    for (idx, (img, dets)) in images.iter().zip(detections).enumerate() {
        for t in &img.truths {
            if let ObjectClass::Known(c) = t.class() {
                if let Some(ev) = evidence.get_mut(c) {
                    ev.truths.push((idx, *t.bbox()));
                }
            }
        }
        for d in &dets.detections {
            if let ObjectClass::Known(c) = d.class {
                if let Some(ev) = evidence.get_mut(c) {
                    ev.detections.push((idx, d.bbox, d.confidence));
                }
            }
        }
    }
    evidence
}

pub fn evaluate_detections(
    space: &LabelSpace,
    images: &[ImageRecord],
    detections: &[ImageDetections],
    iou_threshold: f64,
) -> (ConfusionCounts, Vec<ClassAp>) {
    let counts: ConfusionCounts = images
        .par_iter()
        .zip(detections)
        .map(|(img, d)| confusion_counts(&d.detections, &img.truths, iou_threshold))
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let per_class = class_evidence(space, images, detections)
        .iter()
        .zip(space.known_classes())
        .map(|(ev, name)| ClassAp {
            class: name.clone(),
            ap: ev.average_precision(iou_threshold),
        })
        .collect();
    (counts, per_class)
}

/// Precision-recall points of every known class, for CSV export.
pub fn pr_curves(
    space: &LabelSpace,
    images: &[ImageRecord],
    detections: &[ImageDetections],
    iou_threshold: f64,
) -> Vec<(String, Vec<PrPoint>)> {
    class_evidence(space, images, detections)
        .iter()
        .zip(space.known_classes())
        .map(|(ev, name)| (name.clone(), ev.pr_curve(iou_threshold)))
        .collect()
}

pub struct Evaluation {
    pub report: EvaluationReport,
    pub detections: Vec<ImageDetections>,
}

/// Full evaluation of a trained detector on a split.
pub fn evaluate(
    detector: &ToyDetector,
    mode: TrainingMode,
    images: &[ImageRecord],
    rejection: &RejectionConfig,
    iou_threshold: f64,
) -> Result<Evaluation> {
    let detections = detect(detector, images, rejection)?;
    let (counts, per_class) =
        evaluate_detections(&detector.label_space, images, &detections, iou_threshold);
    let (known, unknown) = objectness_by_truth_kind(detector, images, iou_threshold)?;
    let config = serde_json::json!({
        "rejection": rejection.resolved(),
        "iou_threshold": iou_threshold,
        "tau_obj": detector.tau_obj,
    });
    let report = build_report(
        &mode.to_string(),
        &rejection.strategy.to_string(),
        counts,
        per_class,
        (avg_obj(&known).ok(), avg_obj(&unknown).ok()),
        config,
    );
    Ok(Evaluation { report, detections })
}
