//! Open-set evaluation: confusion accounting, Wilderness Impact, unknown-class
//! precision/recall/F1, average precision and mean objectness.
//!
//! Accounting rules (all matching at a single IoU threshold, default 0.5):
//!
//! * a known-class detection greedily matched to a same-class known truth is a
//!   `tp_c`;
//! * an unmatched known-class detection whose highest-IoU truth is an unknown
//!   object (IoU at or above the threshold) is a `fp_o`, otherwise a `fp_c`;
//! * an unknown-class detection greedily matched to an unknown truth is a
//!   `tp_o`; unmatched unknown-class detections are false alarms and are also
//!   added to `fp_o`;
//! * unknown truths left unmatched by unknown-class detections are `fn_o`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{confidence_order, iou, match_greedy};
use crate::model::{BBox, Detection, GroundTruthObject, ObjectClass};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionCounts {
    pub tp_c: u64,
    pub fp_c: u64,
    pub tp_o: u64,
    pub fp_o: u64,
    pub fn_o: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp_c: self.tp_c + o.tp_c,
            fp_c: self.fp_c + o.fp_c,
            tp_o: self.tp_o + o.tp_o,
            fp_o: self.fp_o + o.fp_o,
            fn_o: self.fn_o + o.fn_o,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts for a single image.
pub fn confusion_counts(
    detections: &[Detection],
    truths: &[GroundTruthObject],
    iou_threshold: f64,
) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();

    let known_classes: BTreeSet<usize> = detections
        .iter()
        .filter_map(|d| match d.class {
            ObjectClass::Known(c) => Some(c),
            ObjectClass::Unknown => None,
        })
        .collect();

    for c in known_classes {
        let dets: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.class == ObjectClass::Known(c))
            .collect();
        let same: Vec<BBox> = truths
            .iter()
            .filter(|t| t.class() == ObjectClass::Known(c))
            .map(|t| *t.bbox())
            .collect();
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let conf: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
        let m = match_greedy(&boxes, &conf, &same, iou_threshold);
        for (d, assigned) in dets.iter().zip(&m.detection_to_truth) {
            if assigned.is_some() {
                counts.tp_c += 1;
                continue;
            }
            // highest-IoU truth of any kind; ties favour the earlier truth
            let mut best: Option<(&GroundTruthObject, f64)> = None;
            for t in truths {
                let o = iou(&d.bbox, t.bbox());
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((t, o));
                }
            }
            match best {
                Some((t, o)) if t.class().is_unknown() && o >= iou_threshold => counts.fp_o += 1,
                _ => counts.fp_c += 1,
            }
        }
    }

    let unknown_dets: Vec<&Detection> =
        detections.iter().filter(|d| d.class.is_unknown()).collect();
    let unknown_truths: Vec<BBox> = truths
        .iter()
        .filter(|t| t.class().is_unknown())
        .map(|t| *t.bbox())
        .collect();
    let boxes: Vec<BBox> = unknown_dets.iter().map(|d| d.bbox).collect();
    let conf: Vec<f64> = unknown_dets.iter().map(|d| d.confidence).collect();
    let m = match_greedy(&boxes, &conf, &unknown_truths, iou_threshold);
    let matched = m.detection_to_truth.iter().filter(|a| a.is_some()).count() as u64;
    counts.tp_o += matched;
    counts.fp_o += unknown_dets.len() as u64 - matched;
    counts.fn_o += m.truth_matched.iter().filter(|&&t| !t).count() as u64;
    counts
}

/// Closed-set precision over open-set precision, minus one.
pub fn wilderness_impact(c: &ConfusionCounts) -> Result<f64> {
    let closed = c.tp_c + c.fp_c;
    let open_tp = c.tp_c + c.tp_o;
    if closed == 0 {
        return Err(Error::UndefinedPrecision("TP_c + FP_c"));
    }
    if open_tp == 0 {
        return Err(Error::UndefinedPrecision("TP_c + TP_o"));
    }
    // one exact integer numerator instead of a product of ratios minus one
    let open_all = i128::from(c.tp_c + c.fp_c + c.tp_o + c.fp_o);
    let (closed, open_tp) = (i128::from(closed), i128::from(open_tp));
    let num = i128::from(c.tp_c) * open_all - closed * open_tp;
    Ok(num as f64 / (closed * open_tp) as f64)
}

/// `FP_o / (TP_c + FP_c)`: the impact measure for detectors without rejection.
pub fn wi_no_rejection(c: &ConfusionCounts) -> Result<f64> {
    let closed = c.tp_c + c.fp_c;
    if closed == 0 {
        return Err(Error::UndefinedPrecision("TP_c + FP_c"));
    }
    Ok(c.fp_o as f64 / closed as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownPrf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Unknown-class recall, precision and F1 as ratios; 0/0 is taken as 0.
pub fn unknown_prf(c: &ConfusionCounts) -> UnknownPrf {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let recall = ratio(c.tp_o, c.tp_o + c.fn_o);
    let precision = ratio(c.tp_o, c.tp_o + c.fp_o);
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    UnknownPrf {
        recall,
        precision,
        f1,
    }
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Detections and truths for one class, possibly spanning several images.
/// Detections are only matched against truths of the same image.
#[derive(Debug, Clone, Default)]
pub struct ClassEvidence {
    /// (image index, box, confidence)
    pub detections: Vec<(usize, BBox, f64)>,
    /// (image index, box)
    pub truths: Vec<(usize, BBox)>,
}

impl ClassEvidence {
    /// TP/FP flag of each detection in ranking order (descending confidence,
    /// ties by insertion order).
    pub fn ranked_outcomes(&self, iou_threshold: f64) -> Vec<bool> {
        let mut is_tp = vec![false; self.detections.len()];
        let images: BTreeSet<usize> = self.detections.iter().map(|d| d.0).collect();
        for img in images {
            let idx: Vec<usize> = (0..self.detections.len())
                .filter(|&i| self.detections[i].0 == img)
                .collect();
            let boxes: Vec<BBox> = idx.iter().map(|&i| self.detections[i].1).collect();
            let conf: Vec<f64> = idx.iter().map(|&i| self.detections[i].2).collect();
            let truths: Vec<BBox> = self
                .truths
                .iter()
                .filter(|t| t.0 == img)
                .map(|t| t.1)
                .collect();
            let m = match_greedy(&boxes, &conf, &truths, iou_threshold);
            for (local, assigned) in m.detection_to_truth.iter().enumerate() {
                is_tp[idx[local]] = assigned.is_some();
            }
        }
        let conf: Vec<f64> = self.detections.iter().map(|d| d.2).collect();
        confidence_order(&conf).into_iter().map(|i| is_tp[i]).collect()
    }

    /// Precision/recall after each ranked detection; empty without truths.
    pub fn pr_curve(&self, iou_threshold: f64) -> Vec<PrPoint> {
        let n = self.truths.len();
        if n == 0 {
            return Vec::new();
        }
        let mut tp = 0usize;
        self.ranked_outcomes(iou_threshold)
            .into_iter()
            .enumerate()
            .map(|(rank, hit)| {
                tp += usize::from(hit);
                PrPoint {
                    precision: tp as f64 / (rank + 1) as f64,
                    recall: tp as f64 / n as f64,
                }
            })
            .collect()
    }

    /// All-point interpolated AP; `None` when the class has no truths.
    pub fn average_precision(&self, iou_threshold: f64) -> Option<f64> {
        if self.truths.is_empty() {
            return None;
        }
        Some(ap_from_outcomes(
            &self.ranked_outcomes(iou_threshold),
            self.truths.len(),
        ))
    }
}

/// All-point interpolated AP from ranked TP/FP outcomes, with a single
/// backward sweep carrying the running precision envelope.
pub fn ap_from_outcomes(ranked_tp: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    // each hit advances recall by 1/num_truths; dividing once at the end
    // keeps a perfect ranking at exactly 1
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    for (i, &hit) in ranked_tp.iter().enumerate().rev() {
        envelope = envelope.max(precision[i]);
        if hit {
            area += envelope;
        }
    }
    area / num_truths as f64
}

/// AP of one class within one image.
pub fn average_precision(
    detections: &[(BBox, f64)],
    truths: &[BBox],
    iou_threshold: f64,
) -> Option<f64> {
    let evidence = ClassEvidence {
        detections: detections.iter().map(|(b, c)| (0, *b, *c)).collect(),
        truths: truths.iter().map(|b| (0, *b)).collect(),
    };
    evidence.average_precision(iou_threshold)
}

/// Arithmetic mean over the classes that have an AP.
pub fn mean_average_precision(per_class: &[Option<f64>]) -> Option<f64> {
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Mean foreground probability over a set of ground-truth proposals.
pub fn avg_obj(fg_probabilities: &[f64]) -> Result<f64> {
    if fg_probabilities.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(fg_probabilities.iter().sum::<f64>() / fg_probabilities.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAp {
    pub class: String,
    pub ap: Option<f64>,
}

/// Everything one evaluation run produces, in the layout of the comparison
/// table (mAP%, WI_no_rej, WI, U_Recall, U_Precision, U_F1).
///
/// Ratios are stored as ratios; rendering converts mAP and the unknown-class
/// metrics to percentages. Undefined values are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub training: String,
    pub rejection: String,
    pub map: Option<f64>,
    pub wi_no_rej: Option<f64>,
    pub wi: Option<f64>,
    pub u_recall: f64,
    pub u_precision: f64,
    pub u_f1: f64,
    pub counts: ConfusionCounts,
    pub per_class_ap: Vec<ClassAp>,
    pub avg_obj_known: Option<f64>,
    pub avg_obj_unknown: Option<f64>,
    pub config: serde_json::Value,
}

pub fn build_report(
    training: &str,
    rejection: &str,
    counts: ConfusionCounts,
    per_class_ap: Vec<ClassAp>,
    avg_obj_pair: (Option<f64>, Option<f64>),
    config: serde_json::Value,
) -> EvaluationReport {
    let prf = unknown_prf(&counts);
    let aps: Vec<Option<f64>> = per_class_ap.iter().map(|c| c.ap).collect();
    EvaluationReport {
        training: training.to_string(),
        rejection: rejection.to_string(),
        map: mean_average_precision(&aps),
        wi_no_rej: wi_no_rejection(&counts).ok(),
        wi: wilderness_impact(&counts).ok(),
        u_recall: prf.recall,
        u_precision: prf.precision,
        u_f1: prf.f1,
        counts,
        per_class_ap,
        avg_obj_known: avg_obj_pair.0,
        avg_obj_unknown: avg_obj_pair.1,
        config,
    }
}

pub const TABLE_HEADER: [&str; 8] = [
    "Training",
    "Rejection",
    "mAP%",
    "WI_no_rej",
    "WI",
    "U_Recall",
    "U_Precision",
    "U_F1",
];

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", x * scale))
}

impl EvaluationReport {
    /// Row cells in table-header order.
    pub fn table_row(&self) -> [String; 8] {
        [
            self.training.clone(),
            self.rejection.clone(),
            fmt_opt(self.map, 100.0),
            fmt_opt(self.wi_no_rej, 1.0),
            fmt_opt(self.wi, 1.0),
            fmt_opt(Some(self.u_recall), 100.0),
            fmt_opt(Some(self.u_precision), 100.0),
            fmt_opt(Some(self.u_f1), 100.0),
        ]
    }
}

/// Fixed-width text table of one or more reports.
pub fn render_table(reports: &[&EvaluationReport]) -> String {
    let rows: Vec<[String; 8]> = reports.iter().map(|r| r.table_row()).collect();
    let widths: Vec<usize> = (0..8)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(TABLE_HEADER[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 2 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
    };
    line(TABLE_HEADER.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
