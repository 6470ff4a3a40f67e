//! Unknown-detection strategies applied to classified region proposals:
//! direct prediction, maximum softmax probability, energy and ODIN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::nms;
use crate::model::{validate_label_space, Detection, LabelSpace, ObjectClass, RegionProposal, Slot};

pub const DEFAULT_TAU_MSP: f64 = 0.5;
/// Threshold on the literal (negated log-sum-exp) energy.
pub const DEFAULT_TAU_ENERGY_LITERAL: f64 = -3.0;
pub const DEFAULT_TAU_ODIN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Direct,
    Msp,
    Energy,
    Odin,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Direct => "direct",
            Strategy::Msp => "msp",
            Strategy::Energy => "energy",
            Strategy::Odin => "odin",
        })
    }
}

/// Which sign convention the energy threshold is applied in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyDirection {
    /// `E = -T log sum exp(s / T)`, flagged when `E <= tau`.
    Literal,
    /// `score = T log sum exp(s / T)` (higher for known samples), flagged when `score <= tau`.
    NegativeEnergy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    pub strategy: Strategy,
    pub tau_msp: f64,
    /// `None` resolves to -3 in literal mode and +3 in negative-energy mode.
    pub tau_energy: Option<f64>,
    pub tau_odin: f64,
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub epsilon: f64,
    pub energy_direction: EnergyDirection,
    /// IoU threshold of the per-class NMS run after rejection.
    pub nms_iou: f64,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            tau_msp: DEFAULT_TAU_MSP,
            tau_energy: None,
            tau_odin: DEFAULT_TAU_ODIN,
            energy_temperature: 1.0,
            odin_temperature: 1000.0,
            epsilon: 0.01,
            energy_direction: EnergyDirection::NegativeEnergy,
            nms_iou: 0.5,
        }
    }
}

impl RejectionConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn tau_energy(&self) -> f64 {
        self.tau_energy.unwrap_or(match self.energy_direction {
            EnergyDirection::Literal => DEFAULT_TAU_ENERGY_LITERAL,
            EnergyDirection::NegativeEnergy => -DEFAULT_TAU_ENERGY_LITERAL,
        })
    }

    /// Copy with every defaulted field made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            tau_energy: Some(self.tau_energy()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("rejection.tau_msp", self.tau_msp),
            ("rejection.tau_energy", self.tau_energy()),
            ("rejection.tau_odin", self.tau_odin),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        for (field, t) in [
            ("rejection.energy_temperature", self.energy_temperature),
            ("rejection.odin_temperature", self.odin_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("rejection.epsilon", "must be non-negative"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config("rejection.nms_iou", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Outcome of a thresholded score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub unknown: bool,
    pub score: f64,
}

/// `T * log(sum_c exp(s_c / T))`, shifted by the maximum for stability.
pub fn log_sum_exp(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = logits.iter().map(|s| ((s - max) / temperature).exp()).sum();
    max + temperature * sum.ln()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Largest softmax probability at temperature `T`.
pub fn max_softmax(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|s| ((s - max) / temperature).exp()).sum();
    1.0 / sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectOutcome {
    pub unknown: bool,
    pub predicted: Slot,
}

/// Argmax over every slot (known, background, unknown). Unknown when the
/// unknown slot wins, or background wins while the objectness exceeds `tau_obj`.
pub fn direct_predict(
    space: &LabelSpace,
    logits: &[f64],
    objectness: f64,
    tau_obj: f64,
) -> Result<DirectOutcome> {
    if !space.has_unknown_class() {
        return Err(Error::MissingUnknownSlot);
    }
    validate_label_space(space, logits.len())?;
    let predicted = space
        .slot(argmax(logits))
        .expect("argmax lies inside a validated logit vector");
    let unknown = match predicted {
        Slot::Unknown => true,
        Slot::Background => objectness > tau_obj,
        Slot::Known(_) => false,
    };
    Ok(DirectOutcome { unknown, predicted })
}

/// Maximum softmax probability over known classes and background.
pub fn msp_reject(known_and_background: &[f64], tau_msp: f64) -> Verdict {
    let score = max_softmax(known_and_background, 1.0);
    Verdict {
        unknown: score <= tau_msp,
        score,
    }
}

/// Energy `-T log sum_c exp(s_c / T)` over known classes and background.
pub fn energy_score(known_and_background: &[f64], temperature: f64) -> f64 {
    -log_sum_exp(known_and_background, temperature)
}

/// Thresholds the energy in the configured direction. The returned score is
/// `E` in literal mode and `-E` in negative-energy mode.
pub fn energy_reject(known_and_background: &[f64], config: &RejectionConfig) -> Verdict {
    let energy = energy_score(known_and_background, config.energy_temperature);
    let score = match config.energy_direction {
        EnergyDirection::Literal => energy,
        EnergyDirection::NegativeEnergy => -energy,
    };
    Verdict {
        unknown: score <= config.tau_energy(),
        score,
    }
}

/// Temperature-scaled maximum softmax over the known classes only.
pub fn odin_reject(known: &[f64], temperature: f64, tau_odin: f64) -> Verdict {
    let score = max_softmax(known, temperature);
    Verdict {
        unknown: score <= tau_odin,
        score,
    }
}

/// A classifier head that can be re-evaluated on perturbed features.
pub trait ClassifierHead: Sync {
    fn label_space(&self) -> &LabelSpace;

    fn logits(&self, features: &[f64]) -> Vec<f64>;

    /// Gradient with respect to `features` of `log max_c softmax(s)_c`, the
    /// softmax taken over known classes and background.
    fn log_msp_gradient(&self, features: &[f64]) -> Vec<f64>;
}

/// Source of input gradients for the ODIN perturbation.
#[derive(Clone, Copy)]
pub enum GradientOracle<'a> {
    Available(&'a dyn ClassifierHead),
    Unavailable,
}

impl<'a> GradientOracle<'a> {
    pub fn is_available(&self) -> bool {
        matches!(self, GradientOracle::Available(_))
    }

    pub fn head(&self) -> Option<&'a dyn ClassifierHead> {
        match self {
            GradientOracle::Available(h) => Some(*h),
            GradientOracle::Unavailable => None,
        }
    }

    /// Gradient of `(1/R) sum_r log max softmax` with respect to each region's
    /// features (one row per region).
    pub fn gradient(&self, batch: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let head = self.head()?;
        let scale = 1.0 / batch.len().max(1) as f64;
        Some(
            batch
                .iter()
                .map(|x| head.log_msp_gradient(x).into_iter().map(|g| g * scale).collect())
                .collect(),
        )
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x - eps * sgn(-grad)` applied to every region's features. Without an
/// oracle the perturbation is skipped (equivalent to `eps = 0`).
pub fn odin_perturb(batch: &[Vec<f64>], epsilon: f64, oracle: &GradientOracle<'_>) -> Vec<Vec<f64>> {
    if epsilon == 0.0 || batch.is_empty() {
        return batch.to_vec();
    }
    let Some(grad) = oracle.gradient(batch) else {
        log::warn!("no gradient oracle available; ODIN perturbation disabled (epsilon = 0)");
        return batch.to_vec();
    };
    batch
        .iter()
        .zip(&grad)
        .map(|(x, g)| {
            x.iter()
                .zip(g)
                .map(|(xi, gi)| xi - epsilon * sgn(-gi))
                .collect()
        })
        .collect()
}

/// Turns one image's scored proposals into detections under the configured
/// strategy, then runs per-class NMS.
///
/// Proposals predicted as background (and not promoted to unknown) are dropped.
/// Regions rejected by MSP or ODIN keep their proposal box and get confidence
/// `1 - score`; energy-rejected regions get the literal energy as confidence.
pub fn apply_rejection(
    proposals: &[RegionProposal],
    space: &LabelSpace,
    config: &RejectionConfig,
    oracle: &GradientOracle<'_>,
    tau_obj: Option<f64>,
) -> Result<Vec<Detection>> {
    if config.strategy == Strategy::Direct && !space.has_unknown_class() {
        return Err(Error::MissingUnknownSlot);
    }
    let k = space.num_known();
    let mut logits = Vec::with_capacity(proposals.len());
    for p in proposals {
        let l = p
            .logits
            .as_ref()
            .ok_or_else(|| Error::config("proposal.logits", "proposal has not been classified"))?;
        validate_label_space(space, l.len())?;
        logits.push(l.as_slice());
    }

    let odin_scores: Vec<Verdict> = if config.strategy == Strategy::Odin {
        let perturbed_logits: Vec<Vec<f64>> = match oracle.head() {
            Some(head) if config.epsilon > 0.0 => {
                let feats: Vec<Vec<f64>> = proposals.iter().map(|p| p.features.clone()).collect();
                odin_perturb(&feats, config.epsilon, oracle)
                    .iter()
                    .map(|x| head.logits(x))
                    .collect()
            }
            _ => {
                if config.epsilon > 0.0 {
                    log::warn!("ODIN without a gradient oracle: perturbation disabled");
                }
                logits.iter().map(|l| l.to_vec()).collect()
            }
        };
        perturbed_logits
            .iter()
            .map(|l| odin_reject(&l[..k], config.odin_temperature, config.tau_odin))
            .collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::new();
    for (i, (p, l)) in proposals.iter().zip(&logits).enumerate() {
        let closed = &l[..=k];
        let closed_probs = softmax(closed, 1.0);
        let closed_pred = argmax(closed);
        let known = |c: usize| (c < k).then(|| (ObjectClass::Known(c), closed_probs[c]));

        let emitted = match config.strategy {
            Strategy::None => known(closed_pred),
            Strategy::Direct => {
                let tau = tau_obj.ok_or_else(|| {
                    Error::config("tau_obj", "direct prediction needs the model's objectness threshold")
                })?;
                let outcome = direct_predict(space, l, p.objectness, tau)?;
                match (outcome.unknown, outcome.predicted) {
                    (true, Slot::Unknown) => {
                        Some((ObjectClass::Unknown, softmax(l, 1.0)[space.unknown_id()]))
                    }
                    (true, _) => Some((ObjectClass::Unknown, p.objectness)),
                    (false, Slot::Known(c)) => Some((ObjectClass::Known(c), softmax(l, 1.0)[c])),
                    (false, _) => None,
                }
            }
            Strategy::Msp => {
                let v = msp_reject(closed, config.tau_msp);
                if v.unknown {
                    Some((ObjectClass::Unknown, 1.0 - v.score))
                } else {
                    known(closed_pred)
                }
            }
            Strategy::Energy => {
                let v = energy_reject(closed, config);
                if v.unknown {
                    Some((ObjectClass::Unknown, energy_score(closed, config.energy_temperature)))
                } else {
                    known(closed_pred)
                }
            }
            Strategy::Odin => {
                let v = odin_scores[i];
                if v.unknown {
                    Some((ObjectClass::Unknown, 1.0 - v.score))
                } else {
                    known(closed_pred)
                }
            }
        };
        if let Some((class, confidence)) = emitted {
            out.push(Detection::new(p.bbox, class, confidence, p.objectness)?);
        }
    }
    Ok(nms(&out, config.nms_iou))
}
