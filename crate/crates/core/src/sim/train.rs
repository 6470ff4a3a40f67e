//! Alternating four-step training of the toy detector.
//!
//! Steps 1 and 3 fit the objectness scorer, steps 2 and 4 the classification
//! head. In `unkad` mode a pseudo-labeling pass follows steps 1 and 3: regions
//! above the objectness threshold that overlap no annotation become
//! unknown-class positives for the next steps. `standard` mode never
//! pseudo-labels and its head has no unknown slot.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::model::{GroundTruthObject, LabelSpace, ObjectClass, RegionProposal};
use crate::pseudolabel::{
    compute_tau_obj, generate_pseudo_labels, select_foreground_rois, PseudoLabel, TauObj,
    DEFAULT_LAMBDA, MATCHED_IOU,
};
use crate::sim::detector::{ToyDetector, TraceEntry};
use crate::sim::scenario::{mix_seed, ImageRecord, Scenario};

/// Regions at or above this IoU with an annotation take its class in the head.
pub const CLASSIFIER_FG_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Unkad,
    Standard,
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainingMode::Unkad => "unkad",
            TrainingMode::Standard => "standard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub learning_rate: f64,
    /// Iterations of steps 1-4.
    pub iterations: [usize; 4],
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Unkad,
            learning_rate: 0.003,
            iterations: [2000, 2000, 500, 500],
            batch_size: 32,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be non-negative and finite"));
        }
        if self.iterations.contains(&0) {
            return Err(Error::config("train.iterations", "all four counts must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("train.lambda", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePseudoLabels {
    pub image_id: u64,
    pub labels: Vec<PseudoLabel>,
}

/// One pseudo-labeling pass over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelPass {
    /// 1 after step 1, 2 after step 3.
    pub pass: u8,
    pub tau: TauObj,
    pub images: Vec<ImagePseudoLabels>,
}

impl PseudoLabelPass {
    pub fn total(&self) -> usize {
        self.images.iter().map(|i| i.labels.len()).sum()
    }
}

/// Scores every region of an image with the current detector.
pub fn score_image(detector: &ToyDetector, image: &ImageRecord) -> Result<Vec<RegionProposal>> {
    image.regions.iter().map(|r| detector.score_region(r)).collect()
}

/// Derives the objectness threshold from the foreground RoIs of every image
/// with annotations, then pseudo-labels every image against it.
pub fn pseudo_label_pass(
    detector: &ToyDetector,
    images: &[ImageRecord],
    lambda: f64,
    pass: u8,
) -> Result<PseudoLabelPass> {
    let scored: Vec<(Vec<RegionProposal>, Vec<GroundTruthObject>)> = images
        .par_iter()
        .map(|img| Ok((score_image(detector, img)?, img.annotated())))
        .collect::<Result<_>>()?;

    let mut fg = Vec::new();
    for (proposals, annotated) in &scored {
        if annotated.is_empty() {
            continue;
        }
        for i in select_foreground_rois(proposals, annotated)? {
            fg.push(proposals[i].objectness);
        }
    }
    let tau = compute_tau_obj(&fg, lambda)?;
    let labelled = scored
        .par_iter()
        .zip(images)
        .map(|((proposals, annotated), img)| ImagePseudoLabels {
            image_id: img.image_id,
            labels: generate_pseudo_labels(proposals, annotated, &tau),
        })
        .collect();
    Ok(PseudoLabelPass {
        pass,
        tau,
        images: labelled,
    })
}

/// Per-image supervision.
struct ImageTargets {
    /// Foreground RoIs (objectness positives).
    foreground: BTreeSet<usize>,
    /// Max IoU with any annotation and the class of that annotation.
    best: Vec<(f64, Option<usize>)>,
    /// Clutter regions: nothing, hidden or not, overlaps them by 0.3 or more.
    /// These are the objectness negatives. Sampling negatives from the
    /// background rather than from "anything unannotated" mirrors a region
    /// proposal network, whose negatives are overwhelmingly true background.
    clutter: Vec<bool>,
}

fn image_targets(image: &ImageRecord) -> Result<ImageTargets> {
    let annotated = image.annotated();
    let foreground = if annotated.is_empty() {
        BTreeSet::new()
    } else {
        let proposals: Vec<RegionProposal> = image
            .regions
            .iter()
            .map(|r| RegionProposal::new(r.bbox, 0.0, Vec::new()))
            .collect::<Result<_>>()?;
        select_foreground_rois(&proposals, &annotated)?.into_iter().collect()
    };
    let best = image
        .regions
        .iter()
        .map(|r| {
            let mut best = (0.0, None);
            for t in &annotated {
                let o = iou(&r.bbox, t.bbox());
                if o > best.0 {
                    let class = match t.class() {
                        ObjectClass::Known(c) => Some(c),
                        ObjectClass::Unknown => None,
                    };
                    best = (o, class);
                }
            }
            best
        })
        .collect();
    let clutter = image
        .regions
        .iter()
        .map(|r| image.truths.iter().all(|t| iou(&r.bbox, t.bbox()) < MATCHED_IOU))
        .collect();
    Ok(ImageTargets {
        foreground,
        best,
        clutter,
    })
}

/// Drives the four steps; exposed step by step so intermediate detectors can
/// be inspected.
pub struct FourStepTrainer<'a> {
    images: &'a [ImageRecord],
    targets: Vec<ImageTargets>,
    config: TrainConfig,
    detector: ToyDetector,
    audit: Vec<PseudoLabelPass>,
}

impl<'a> FourStepTrainer<'a> {
    pub fn new(
        images: &'a [ImageRecord],
        base_space: &LabelSpace,
        feature_dim: usize,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let space = base_space.with_unknown_class(config.mode == TrainingMode::Unkad);
        let targets = images.iter().map(image_targets).collect::<Result<_>>()?;
        Ok(Self {
            images,
            targets,
            detector: ToyDetector::new(space, feature_dim),
            config,
            audit: Vec::new(),
        })
    }

    pub fn detector(&self) -> &ToyDetector {
        &self.detector
    }

    pub fn audit(&self) -> &[PseudoLabelPass] {
        &self.audit
    }

    fn latest_pseudo(&self) -> Vec<BTreeSet<usize>> {
        match (self.config.mode, self.audit.last()) {
            (TrainingMode::Unkad, Some(pass)) => pass
                .images
                .iter()
                .map(|i| i.labels.iter().map(|l| l.proposal_index).collect())
                .collect(),
            _ => vec![BTreeSet::new(); self.images.len()],
        }
    }

    /// Objectness samples: foreground RoIs (plus pseudo-labels when
    /// `with_pseudo`) are positives; clutter regions are negatives; the rest is
    /// ignored.
    fn objectness_samples(&self, with_pseudo: bool) -> Vec<(&'a [f64], f64)> {
        let pseudo = if with_pseudo {
            self.latest_pseudo()
        } else {
            vec![BTreeSet::new(); self.images.len()]
        };
        let mut out = Vec::new();
        for ((img, t), ps) in self.images.iter().zip(&self.targets).zip(&pseudo) {
            for (i, r) in img.regions.iter().enumerate() {
                if t.foreground.contains(&i) || ps.contains(&i) {
                    out.push((r.features.as_slice(), 1.0));
                } else if t.clutter[i] {
                    out.push((r.features.as_slice(), 0.0));
                }
            }
        }
        out
    }

    /// Classifier samples: annotated class at IoU >= 0.5, unknown for
    /// pseudo-labeled regions, background otherwise.
    fn classifier_samples(&self) -> Vec<(&'a [f64], usize)> {
        let space = &self.detector.label_space;
        let pseudo = self.latest_pseudo();
        let mut out = Vec::new();
        for ((img, t), ps) in self.images.iter().zip(&self.targets).zip(&pseudo) {
            for (i, r) in img.regions.iter().enumerate() {
                let label = match t.best[i] {
                    (o, Some(c)) if o >= CLASSIFIER_FG_IOU => c,
                    _ if ps.contains(&i) => space.unknown_id(),
                    _ => space.background_id(),
                };
                out.push((r.features.as_slice(), label));
            }
        }
        out
    }

    fn rng(&self, step: u8) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, u64::from(step)))
    }

    fn record(&mut self, step: u8, iteration: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                iteration,
                loss,
            });
        }
        self.detector.trace.push(TraceEntry {
            step,
            iteration,
            loss,
        });
        Ok(())
    }

    fn fit_objectness(&mut self, step: u8, samples: &[(&[f64], f64)]) -> Result<()> {
        if !samples.iter().any(|s| s.1 == 1.0) {
            return Err(Error::config("train", "objectness step has no positive regions"));
        }
        let iterations = self.config.iterations[usize::from(step - 1)];
        let every = (iterations / 50).max(1);
        let lr = self.config.learning_rate;
        let mut rng = self.rng(step);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        self.record(step, 0, self.detector.objectness.loss_and_grad(samples).0)?;
        for it in 1..=iterations {
            batch.clear();
            for _ in 0..self.config.batch_size {
                batch.push(samples[rng.random_range(0..samples.len())]);
            }
            let (_, gw, gb) = self.detector.objectness.loss_and_grad(&batch);
            let scorer = &mut self.detector.objectness;
            scorer.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
            scorer.bias -= lr * gb;
            if it % every == 0 || it == iterations {
                self.record(step, it, self.detector.objectness.loss_and_grad(samples).0)?;
            }
        }
        Ok(())
    }

    fn fit_classifier(&mut self, step: u8, samples: &[(&[f64], usize)]) -> Result<()> {
        let width = self.detector.label_space.logit_width();
        if let Some(bad) = samples.iter().find(|s| s.1 >= width) {
            return Err(Error::config("train", format!("label {} outside the label space", bad.1)));
        }
        let iterations = self.config.iterations[usize::from(step - 1)];
        let every = (iterations / 50).max(1);
        let lr = self.config.learning_rate;
        let mut rng = self.rng(step);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        self.record(step, 0, self.detector.classifier.loss_and_grad(samples).0)?;
        for it in 1..=iterations {
            batch.clear();
            for _ in 0..self.config.batch_size {
                batch.push(samples[rng.random_range(0..samples.len())]);
            }
            let (gw, gb) = {
                let (_, gw, gb) = self.detector.classifier.loss_and_grad(&batch);
                (gw, gb)
            };
            let head = &mut self.detector.classifier;
            for (row, grow) in head.weights.iter_mut().zip(&gw) {
                row.iter_mut().zip(grow).for_each(|(w, g)| *w -= lr * g);
            }
            head.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
            if it % every == 0 || it == iterations {
                self.record(step, it, self.detector.classifier.loss_and_grad(samples).0)?;
            }
        }
        Ok(())
    }

    fn refresh_threshold(&mut self, pass: u8) -> Result<()> {
        let labels = pseudo_label_pass(&self.detector, self.images, self.config.lambda, pass)?;
        self.detector.tau_obj = Some(labels.tau);
        if self.config.mode == TrainingMode::Unkad {
            self.audit.push(labels);
        }
        Ok(())
    }

    /// Step 1: objectness on annotated objects, then the first threshold
    /// (and pseudo-labels in unkad mode).
    pub fn step_one(&mut self) -> Result<()> {
        let samples = self.objectness_samples(false);
        self.fit_objectness(1, &samples)?;
        self.refresh_threshold(1)
    }

    pub fn step_two(&mut self) -> Result<()> {
        let samples = self.classifier_samples();
        self.fit_classifier(2, &samples)
    }

    /// Step 3: objectness again, now with pseudo-labeled unknowns as
    /// positives; the threshold and pseudo-labels are regenerated afterwards.
    pub fn step_three(&mut self) -> Result<()> {
        let samples = self.objectness_samples(true);
        self.fit_objectness(3, &samples)?;
        self.refresh_threshold(2)
    }

    pub fn step_four(&mut self) -> Result<()> {
        let samples = self.classifier_samples();
        self.fit_classifier(4, &samples)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            detector: self.detector,
            audit: self.audit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub detector: ToyDetector,
    /// Pseudo-label passes (empty in standard mode).
    pub audit: Vec<PseudoLabelPass>,
}

pub fn run_four_step(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = FourStepTrainer::new(
        &scenario.train,
        &scenario.label_space,
        scenario.config.feature_dim,
        config.clone(),
    )?;
    trainer.step_one()?;
    trainer.step_two()?;
    trainer.step_three()?;
    trainer.step_four()?;
    Ok(trainer.finish())
}
