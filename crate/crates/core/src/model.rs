//! Domain records shared across the pipeline: boxes, the label space, region
//! proposals, ground-truth objects and emitted detections.
//!
//! Class identifiers are logit indices: `0..K` for the `K` known classes, `K`
//! for background and `K + 1` for the unknown class when the head carries it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in continuous image coordinates (corner form).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid("empty area"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// What a single logit index stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Known(usize),
    Background,
    Unknown,
}

/// Class carried by a ground-truth object or emitted by the detector.
///
/// Background is deliberately not representable: detections never carry it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Known(usize),
    Unknown,
}

impl ObjectClass {
    pub fn is_unknown(&self) -> bool {
        matches!(self, ObjectClass::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSpaceRepr {
    known_classes: Vec<String>,
    has_unknown_class: bool,
}

/// Known classes plus background, optionally extended with an unknown class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    known_classes: Vec<String>,
    has_unknown_class: bool,
}

impl LabelSpace {
    pub fn new(known_classes: Vec<String>, has_unknown_class: bool) -> Result<Self> {
        if known_classes.is_empty() {
            return Err(Error::InvalidLabelSpace("no known classes".into()));
        }
        let mut seen = HashSet::new();
        for name in &known_classes {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidLabelSpace(format!(
                    "duplicate class {name:?}"
                )));
            }
        }
        Ok(Self {
            known_classes,
            has_unknown_class,
        })
    }

    /// Label space with `count` known classes named `class_0`, `class_1`, ...
    pub fn numbered(count: usize, has_unknown_class: bool) -> Result<Self> {
        Self::new(
            (0..count).map(|i| format!("class_{i}")).collect(),
            has_unknown_class,
        )
    }

    pub fn known_classes(&self) -> &[String] {
        &self.known_classes
    }

    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn has_unknown_class(&self) -> bool {
        self.has_unknown_class
    }

    pub fn background_id(&self) -> usize {
        self.known_classes.len()
    }

    pub fn unknown_id(&self) -> usize {
        self.known_classes.len() + 1
    }

    pub fn logit_width(&self) -> usize {
        self.known_classes.len() + if self.has_unknown_class { 2 } else { 1 }
    }

    pub fn slot(&self, index: usize) -> Option<Slot> {
        let k = self.num_known();
        match index {
            i if i < k => Some(Slot::Known(i)),
            i if i == k => Some(Slot::Background),
            i if i == k + 1 && self.has_unknown_class => Some(Slot::Unknown),
            _ => None,
        }
    }

    /// Logit index of an object class; `None` for unknown on a standard head
    /// or an out-of-range known class.
    pub fn index_of(&self, class: ObjectClass) -> Option<usize> {
        match class {
            ObjectClass::Known(i) if i < self.num_known() => Some(i),
            ObjectClass::Known(_) => None,
            ObjectClass::Unknown if self.has_unknown_class => Some(self.unknown_id()),
            ObjectClass::Unknown => None,
        }
    }

    pub fn with_unknown_class(&self, has_unknown_class: bool) -> Self {
        Self {
            known_classes: self.known_classes.clone(),
            has_unknown_class,
        }
    }
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = Error;

    fn try_from(r: LabelSpaceRepr) -> Result<Self> {
        LabelSpace::new(r.known_classes, r.has_unknown_class)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(s: LabelSpace) -> Self {
        LabelSpaceRepr {
            known_classes: s.known_classes,
            has_unknown_class: s.has_unknown_class,
        }
    }
}

/// Checks a logit vector width against the label space: `|Y| + 1` for a
/// standard head, `|Y| + 2` when the unknown class is present.
pub fn validate_label_space(space: &LabelSpace, logit_width: usize) -> Result<()> {
    let expected = space.logit_width();
    if expected == logit_width {
        return Ok(());
    }
    let detail = if space.has_unknown_class() {
        format!("{} known + background + unknown", space.num_known())
    } else {
        format!("{} known + background", space.num_known())
    };
    Err(Error::LogitWidth {
        expected,
        actual: logit_width,
        detail,
    })
}

/// A region of interest: box, class-agnostic objectness, features, and the
/// classifier logits once the head has scored it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionProposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl RegionProposal {
    pub fn new(bbox: BBox, objectness: f64, features: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&objectness) {
            return Err(Error::InvalidObjectness(objectness));
        }
        Ok(Self {
            bbox,
            objectness,
            features,
            logits: None,
        })
    }

    pub fn with_logits(mut self, space: &LabelSpace, logits: Vec<f64>) -> Result<Self> {
        validate_label_space(space, logits.len())?;
        self.logits = Some(logits);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Annotated,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroundTruthRepr", into = "GroundTruthRepr")]
pub struct GroundTruthObject {
    bbox: BBox,
    class: ObjectClass,
    visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRepr {
    bbox: BBox,
    class: ObjectClass,
    visibility: Visibility,
}

impl GroundTruthObject {
    /// Known objects are annotated; unknown objects are always hidden from
    /// training annotations.
    pub fn known(bbox: BBox, class: usize) -> Self {
        Self {
            bbox,
            class: ObjectClass::Known(class),
            visibility: Visibility::Annotated,
        }
    }

    pub fn unknown(bbox: BBox) -> Self {
        Self {
            bbox,
            class: ObjectClass::Unknown,
            visibility: Visibility::Hidden,
        }
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn class(&self) -> ObjectClass {
        self.class
    }

    pub fn visibility(&self) -> Visibility {
        self.visibility
    }

    pub fn is_annotated(&self) -> bool {
        self.visibility == Visibility::Annotated
    }
}

impl TryFrom<GroundTruthRepr> for GroundTruthObject {
    type Error = Error;

    fn try_from(r: GroundTruthRepr) -> Result<Self> {
        match (r.class, r.visibility) {
            (ObjectClass::Unknown, Visibility::Annotated) => Err(Error::config(
                "ground_truth.visibility",
                "unknown objects cannot be annotated",
            )),
            (ObjectClass::Known(_), Visibility::Hidden) => Err(Error::config(
                "ground_truth.visibility",
                "known objects are always annotated",
            )),
            _ => Ok(Self {
                bbox: r.bbox,
                class: r.class,
                visibility: r.visibility,
            }),
        }
    }
}

impl From<GroundTruthObject> for GroundTruthRepr {
    fn from(g: GroundTruthObject) -> Self {
        GroundTruthRepr {
            bbox: g.bbox,
            class: g.class,
            visibility: g.visibility,
        }
    }
}

/// Output record of the inference pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub bbox: BBox,
    pub class: ObjectClass,
    pub confidence: f64,
    pub source_objectness: f64,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        class: ObjectClass,
        confidence: f64,
        source_objectness: f64,
    ) -> Result<Self> {
        if !confidence.is_finite() {
            return Err(Error::config("detection.confidence", "must be finite"));
        }
        if !(0.0..=1.0).contains(&source_objectness) {
            return Err(Error::InvalidObjectness(source_objectness));
        }
        Ok(Self {
            bbox,
            class,
            confidence,
            source_objectness,
        })
    }
}
