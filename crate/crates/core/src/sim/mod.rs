//! Synthetic scenes, the toy detector and its training schedule.

pub mod detector;
pub mod scenario;
pub mod train;

pub use detector::{LinearHead, LogisticScorer, ToyDetector, TraceEntry};
pub use scenario::{generate_scenario, ImageRecord, Scenario, ScenarioConfig, SimRegion, Split};
pub use train::{
    pseudo_label_pass, run_four_step, score_image, FourStepTrainer, ImagePseudoLabels,
    PseudoLabelPass, TrainConfig, TrainOutcome, TrainingMode,
};

use crate::rejection::GradientOracle;

/// Input-gradient oracle backed by the detector's classification head.
pub fn gradient_oracle(detector: &ToyDetector) -> GradientOracle<'_> {
    GradientOracle::Available(detector)
}
