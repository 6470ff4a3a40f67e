//! The toy two-stage detector: a logistic objectness scorer and a
//! linear-softmax classification head, both acting directly on region features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_label_space, LabelSpace, RegionProposal};
use crate::pseudolabel::TauObj;
use crate::rejection::{argmax, softmax, ClassifierHead};
use crate::sim::scenario::SimRegion;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticScorer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Mean binary cross-entropy over `(features, target)` pairs and its
    /// gradient `(p - y) x` averaged over the batch.
    pub fn loss_and_grad(&self, batch: &[(&[f64], f64)]) -> (f64, Vec<f64>, f64) {
        let n = batch.len().max(1) as f64;
        let mut loss = 0.0;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = 0.0;
        for (x, y) in batch {
            let z = self.logit(x);
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x.iter()) {
                *g += r * xi;
            }
            gb += r;
        }
        gw.iter_mut().for_each(|g| *g /= n);
        (loss / n, gw, gb / n)
    }
}

/// Affine map from features to one logit per label-space slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearHead {
    /// One row per logit slot.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(slots: usize, dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; slots],
            bias: vec![0.0; slots],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// Mean softmax cross-entropy over `(features, class index)` pairs with
    /// gradients `(p - onehot) x^T` and `p - onehot`.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let n = batch.len().max(1) as f64;
        let slots = self.bias.len();
        let dim = self.weights.first().map_or(0, Vec::len);
        let mut loss = 0.0;
        let mut gw = vec![vec![0.0; dim]; slots];
        let mut gb = vec![0.0; slots];
        for (x, y) in batch {
            let s = self.logits(x);
            let p = softmax(&s, 1.0);
            loss += crate::rejection::log_sum_exp(&s, 1.0) - s[*y];
            for k in 0..slots {
                let r = p[k] - if k == *y { 1.0 } else { 0.0 };
                for (g, xi) in gw[k].iter_mut().zip(x.iter()) {
                    *g += r * xi;
                }
                gb[k] += r;
            }
        }
        for row in &mut gw {
            row.iter_mut().for_each(|g| *g /= n);
        }
        gb.iter_mut().for_each(|g| *g /= n);
        (loss / n, gw, gb)
    }

    /// Gradient of `log max_c softmax(s)_c` with the softmax restricted to the
    /// first `width` slots: `W_m - sum_k p_k W_k` for the winning slot `m`.
    pub fn log_msp_gradient(&self, x: &[f64], width: usize) -> Vec<f64> {
        let s = self.logits(x);
        let p = softmax(&s[..width], 1.0);
        let m = argmax(&s[..width]);
        let dim = x.len();
        (0..dim)
            .map(|j| {
                self.weights[m][j]
                    - (0..width).map(|k| p[k] * self.weights[k][j]).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u8,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDetector {
    pub feature_dim: usize,
    pub label_space: LabelSpace,
    pub objectness: LogisticScorer,
    pub classifier: LinearHead,
    pub tau_obj: Option<TauObj>,
    pub trace: Vec<TraceEntry>,
}

impl ToyDetector {
    pub fn new(label_space: LabelSpace, feature_dim: usize) -> Self {
        let slots = label_space.logit_width();
        Self {
            feature_dim,
            objectness: LogisticScorer::zeros(feature_dim),
            classifier: LinearHead::zeros(slots, feature_dim),
            label_space,
            tau_obj: None,
            trace: Vec::new(),
        }
    }

    /// Structural consistency of a deserialized detector.
    pub fn validate(&self) -> Result<()> {
        let check = |n: usize| {
            if n == self.feature_dim {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    actual: n,
                })
            }
        };
        check(self.objectness.weights.len())?;
        validate_label_space(&self.label_space, self.classifier.weights.len())?;
        validate_label_space(&self.label_space, self.classifier.bias.len())?;
        for row in &self.classifier.weights {
            check(row.len())?;
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.feature_dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            })
        }
    }

    pub fn objectness_forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.objectness.probability(x))
    }

    pub fn classifier_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.classifier.logits(x))
    }

    /// Runs both stages on a region, producing a scored proposal.
    pub fn score_region(&self, region: &SimRegion) -> Result<RegionProposal> {
        let objectness = self.objectness_forward(&region.features)?;
        let logits = self.classifier_forward(&region.features)?;
        RegionProposal::new(region.bbox, objectness, region.features.clone())?
            .with_logits(&self.label_space, logits)
    }
}

impl ClassifierHead for ToyDetector {
    fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.classifier.logits(features)
    }

    fn log_msp_gradient(&self, features: &[f64]) -> Vec<f64> {
        self.classifier
            .log_msp_gradient(features, self.label_space.num_known() + 1)
    }
}
