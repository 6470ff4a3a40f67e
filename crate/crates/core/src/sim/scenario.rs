//! Seeded synthetic scenes standing in for an annotated detection dataset.
//!
//! Feature layout: channel 0 is a generic "object" cue shared by every object
//! class; channel `1 + c` identifies known class `c`, followed by one channel
//! per hidden unknown cluster seen in training images and one per fresh
//! cluster that only appears in the test split. Every class mean carries the
//! same object cue on channel 0. Known identities form a centred simplex, so
//! their average carries no identity signal. A linear objectness scorer
//! therefore has nothing class-specific to latch onto. Unknown identities sit
//! on their own axes. Two known means are `separation` apart, and so are two
//! unknown means. A known and an unknown mean are at least
//! `separation / sqrt(2)` apart. Clutter sits at the origin, at least
//! `object_cue` away from every class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, max_iou};
use crate::model::{BBox, GroundTruthObject, LabelSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Images per split.
    pub num_images: usize,
    /// Object instances per image: uniform in `mean +/- spread`, at least one.
    pub regions_per_image_mean: f64,
    pub regions_per_image_spread: f64,
    pub num_known_classes: usize,
    pub num_unknown_clusters: usize,
    /// Probability that an object instance is drawn from an unknown cluster.
    pub unknown_object_rate: f64,
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    /// Channel-0 value shared by every object class.
    pub object_cue: f64,
    pub feature_noise_scale: f64,
    /// Proposal corners are moved by up to this fraction of the box size.
    pub box_jitter_scale: f64,
    pub proposals_per_object: usize,
    /// Clutter regions per object instance.
    pub background_region_rate: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            regions_per_image_mean: 4.0,
            regions_per_image_spread: 2.0,
            num_known_classes: 3,
            num_unknown_clusters: 2,
            unknown_object_rate: 0.3,
            feature_dim: 8,
            class_mean_separation: 8.0,
            object_cue: 10.0,
            feature_noise_scale: 1.0,
            box_jitter_scale: 0.1,
            proposals_per_object: 3,
            background_region_rate: 2.0,
            image_width: 640.0,
            image_height: 480.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let count = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("scenario.{field}"), "must be at least 1"))
            } else {
                Ok(())
            }
        };
        count("num_images", self.num_images)?;
        count("num_known_classes", self.num_known_classes)?;
        count("feature_dim", self.feature_dim)?;
        count("proposals_per_object", self.proposals_per_object)?;
        let positive = [
            ("regions_per_image_mean", self.regions_per_image_mean),
            ("class_mean_separation", self.class_mean_separation),
            ("object_cue", self.object_cue),
            ("feature_noise_scale", self.feature_noise_scale),
            ("box_jitter_scale", self.box_jitter_scale),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("scenario.{field}"), "must be positive"));
            }
        }
        if !(self.regions_per_image_spread >= 0.0 && self.regions_per_image_spread.is_finite()) {
            return Err(Error::config("scenario.regions_per_image_spread", "must be non-negative"));
        }
        if !(self.background_region_rate >= 0.0 && self.background_region_rate.is_finite()) {
            return Err(Error::config("scenario.background_region_rate", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.unknown_object_rate) {
            return Err(Error::config("scenario.unknown_object_rate", "must lie in [0, 1]"));
        }
        if self.box_jitter_scale >= 0.5 {
            return Err(Error::config("scenario.box_jitter_scale", "must be below 0.5"));
        }
        let needed = 1 + self.num_known_classes + 2 * self.num_unknown_clusters;
        if self.feature_dim < needed {
            return Err(Error::config(
                "scenario.feature_dim",
                format!(
                    "needs at least {needed} channels (1 shared + {} known + 2 x {} unknown)",
                    self.num_known_classes, self.num_unknown_clusters
                ),
            ));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::numbered(self.num_known_classes, false)
    }

    /// Mean feature vector of a class channel (`None` = clutter at the origin).
    pub fn class_mean(&self, channel: Option<usize>) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim];
        if let Some(ch) = channel {
            let s = self.class_mean_separation / std::f64::consts::SQRT_2;
            let k = self.num_known_classes;
            m[0] = self.object_cue;
            if ch < k {
                for v in &mut m[1..=k] {
                    *v = -s / k as f64;
                }
            }
            m[1 + ch] += s;
        }
        m
    }

    /// Identity channel of known class `c`.
    pub fn known_channel(&self, c: usize) -> usize {
        c
    }

    /// Identity channel of unknown cluster `j`; clusters `0..U` appear in
    /// both splits, `U..2U` only in the test split.
    pub fn unknown_channel(&self, j: usize) -> usize {
        self.num_known_classes + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Test => 0x7465_7374_0000_0002,
        }
    }
}

/// A candidate region as emitted by the scene: box plus simulated features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRegion {
    pub bbox: BBox,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: u64,
    pub truths: Vec<GroundTruthObject>,
    pub regions: Vec<SimRegion>,
}

impl ImageRecord {
    /// Truths visible to training (known classes only).
    pub fn annotated(&self) -> Vec<GroundTruthObject> {
        self.truths.iter().filter(|t| t.is_annotated()).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub label_space: LabelSpace,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// SplitMix64 finaliser; derives independent per-image seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let label_space = config.label_space()?;
    let train = generate_split(config, Split::Train)?;
    let test = generate_split(config, Split::Test)?;
    Ok(Scenario {
        config: config.clone(),
        label_space,
        train,
        test,
    })
}

pub fn generate_split(config: &ScenarioConfig, split: Split) -> Result<Vec<ImageRecord>> {
    let base = mix_seed(config.seed, split.tag());
    (0..config.num_images as u64)
        .into_par_iter()
        .map(|id| generate_image(config, split, id, mix_seed(base, id)))
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, config: &ScenarioConfig) -> Result<BBox> {
    let (iw, ih) = (config.image_width, config.image_height);
    let w = rng.random_range(0.08..0.25) * iw;
    let h = rng.random_range(0.08..0.25) * ih;
    let x = rng.random_range(0.0..iw - w);
    let y = rng.random_range(0.0..ih - h);
    BBox::new(x, y, x + w, y + h)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, scale: f64) -> Result<BBox> {
    let (w, h) = (b.width(), b.height());
    let mut d = |size: f64| rng.random_range(-scale..=scale) * size;
    BBox::new(
        b.x_min() + d(w),
        b.y_min() + d(h),
        b.x_max() + d(w),
        b.y_max() + d(h),
    )
}

fn draw_features(rng: &mut ChaCha8Rng, mean: &[f64], noise: &Normal<f64>) -> Vec<f64> {
    mean.iter().map(|m| m + noise.sample(rng)).collect()
}

const PLACEMENT_ATTEMPTS: usize = 100;
/// Objects overlap each other at most this much.
const OBJECT_SEPARATION_IOU: f64 = 0.05;
/// Clutter regions overlap objects at most this much.
const CLUTTER_OBJECT_IOU: f64 = 0.1;

fn generate_image(
    config: &ScenarioConfig,
    split: Split,
    image_id: u64,
    seed: u64,
) -> Result<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.feature_noise_scale)
        .map_err(|e| Error::config("scenario.feature_noise_scale", e.to_string()))?;

    let spread = config.regions_per_image_spread;
    let raw = config.regions_per_image_mean
        + if spread > 0.0 {
            rng.random_range(-spread..=spread)
        } else {
            0.0
        };
    let n_objects = raw.round().max(1.0) as usize;

    let mut truths: Vec<GroundTruthObject> = Vec::new();
    let mut channels: Vec<usize> = Vec::new();
    for _ in 0..n_objects {
        let unknown = config.num_unknown_clusters > 0 && rng.random_bool(config.unknown_object_rate);
        let (truth_class, channel) = if unknown {
            let clusters = match split {
                Split::Train => config.num_unknown_clusters,
                Split::Test => 2 * config.num_unknown_clusters,
            };
            (None, config.unknown_channel(rng.random_range(0..clusters)))
        } else {
            let c = rng.random_range(0..config.num_known_classes);
            (Some(c), config.known_channel(c))
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = random_box(&mut rng, config)?;
            if max_iou(&b, truths.iter().map(|t| t.bbox())) <= OBJECT_SEPARATION_IOU {
                placed = Some(b);
                break;
            }
        }
        if let Some(b) = placed {
            truths.push(match truth_class {
                Some(c) => GroundTruthObject::known(b, c),
                None => GroundTruthObject::unknown(b),
            });
            channels.push(channel);
        }
    }

    let mut regions = Vec::new();
    for (t, &ch) in truths.iter().zip(&channels) {
        let mean = config.class_mean(Some(ch));
        for _ in 0..config.proposals_per_object {
            let bbox = jitter(&mut rng, t.bbox(), config.box_jitter_scale)?;
            regions.push(SimRegion {
                bbox,
                features: draw_features(&mut rng, &mean, &noise),
            });
        }
    }

    let n_clutter = (config.background_region_rate * truths.len() as f64).round() as usize;
    let origin = config.class_mean(None);
    for _ in 0..n_clutter {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = random_box(&mut rng, config)?;
            if truths.iter().all(|t| iou(&b, t.bbox()) <= CLUTTER_OBJECT_IOU) {
                regions.push(SimRegion {
                    bbox: b,
                    features: draw_features(&mut rng, &origin, &noise),
                });
                break;
            }
        }
    }

    // Fisher-Yates so region order carries no information about provenance.
    for i in (1..regions.len()).rev() {
        let j = rng.random_range(0..=i);
        regions.swap(i, j);
    }

    Ok(ImageRecord {
        image_id,
        truths,
        regions,
    })
}
