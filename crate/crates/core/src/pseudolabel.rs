//! Unknown-object discovery: the data-derived objectness threshold and the
//! assignment of the unknown class to confident, unmatched regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, max_iou};
use crate::model::{BBox, GroundTruthObject, RegionProposal};

/// IoU above which a proposal counts as foreground for any truth.
pub const FOREGROUND_IOU: f64 = 0.7;
/// A region overlapping any annotated truth by more than this is considered matched.
pub const MATCHED_IOU: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Objectness threshold `mu + lambda * sigma` over foreground-RoI scores,
/// with the statistics it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauObj {
    pub value: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub sample_count: usize,
}

/// A region promoted to the unknown class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Index of the region in the proposal list it came from.
    pub proposal_index: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub max_gt_iou: f64,
}

/// Indices of the foreground RoIs: for every truth, the proposal with the
/// highest (positive) IoU, plus every proposal with IoU above 0.7 to any truth.
///
/// Returned indices are ascending and duplicate-free.
pub fn select_foreground_rois(
    proposals: &[RegionProposal],
    truths: &[GroundTruthObject],
) -> Result<Vec<usize>> {
    if truths.is_empty() {
        return Err(Error::EmptyTruths);
    }
    let mut selected = vec![false; proposals.len()];
    for truth in truths {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in proposals.iter().enumerate() {
            let o = iou(&p.bbox, truth.bbox());
            if o > FOREGROUND_IOU {
                selected[i] = true;
            }
            if o > 0.0 && best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
        if let Some((i, _)) = best {
            selected[i] = true;
        }
    }
    Ok(selected
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| s.then_some(i))
        .collect())
}

/// Mean and population standard deviation of the foreground objectness
/// scores, combined into `mu + lambda * sigma`.
///
/// Values are summed in sorted order so the result does not depend on the
/// order the scores were collected in.
pub fn compute_tau_obj(fg_objectness: &[f64], lambda: f64) -> Result<TauObj> {
    if fg_objectness.is_empty() {
        return Err(Error::EmptyForegroundSet);
    }
    if !lambda.is_finite() {
        return Err(Error::config("lambda", "must be finite"));
    }
    let mut sorted = fg_objectness.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mu = sorted.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|w| (w - mu) * (w - mu)).collect();
    sq.sort_by(f64::total_cmp);
    let sigma = (sq.iter().sum::<f64>() / n).sqrt();
    Ok(TauObj {
        value: mu + lambda * sigma,
        mu,
        sigma,
        lambda,
        sample_count: sorted.len(),
    })
}

/// Regions with objectness above `tau` whose IoU with every annotated truth is
/// at most 0.3. An image without annotations still uses the global threshold.
pub fn generate_pseudo_labels(
    proposals: &[RegionProposal],
    annotated: &[GroundTruthObject],
    tau: &TauObj,
) -> Vec<PseudoLabel> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.objectness > tau.value)
        .filter_map(|(i, p)| {
            let overlap = max_iou(&p.bbox, annotated.iter().map(|t| t.bbox()));
            (overlap <= MATCHED_IOU).then_some(PseudoLabel {
                proposal_index: i,
                bbox: p.bbox,
                objectness: p.objectness,
                max_gt_iou: overlap,
            })
        })
        .collect()
}
