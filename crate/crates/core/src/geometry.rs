//! Axis-aligned bounding-box arithmetic in normalized image coordinates.
//!
//! Boxes are closed rectangles inside `[0,1]²`. Two overlap measures are
//! provided: intersection over union, which is symmetric, and intersection
//! over target, which divides by the area of its *first* argument and is
//! therefore the more aggressive of the two when a large candidate covers a
//! small target.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: {4}")]
    InvalidBox(f64, f64, f64, f64, &'static str),
    #[error("overlap threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("empty proposal list")]
    NoProposals,
}

/// A validated box with `x1 < x2`, `y1 < y2` and all coordinates in `[0,1]`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let bad = |why| Err(GeometryError::InvalidBox(x1, y1, x2, y2, why));
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return bad("non-finite coordinate");
        }
        if ![x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("coordinate outside [0, 1]");
        }
        if !(x1 < x2 && y1 < y2) {
            return bad("zero or negative area");
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the intersection; 0 when the boxes only touch or are disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// `(x1, y1, x2, y2, area)`, the spatial input of the box embedding.
    pub fn spatial_features(&self) -> [f64; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Debug for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Symmetric.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Intersection over the area of `target`. Not symmetric.
pub fn iot(target: &BoundingBox, candidate: &BoundingBox) -> f64 {
    let inter = target.intersection_area(candidate);
    (inter / target.area()).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMeasure {
    IoU,
    IoT,
}

impl OverlapMeasure {
    pub fn apply(self, target: &BoundingBox, candidate: &BoundingBox) -> f64 {
        match self {
            OverlapMeasure::IoU => iou(target, candidate),
            OverlapMeasure::IoT => iot(target, candidate),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OverlapMeasure::IoU => "iou",
            OverlapMeasure::IoT => "iot",
        }
    }
}

impl fmt::Display for OverlapMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OverlapMeasure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iou" => Ok(OverlapMeasure::IoU),
            "iot" => Ok(OverlapMeasure::IoT),
            other => Err(format!("unknown overlap measure `{other}` (expected iou or iot)")),
        }
    }
}

/// Which overlap measure triggers co-masking, and at what threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct OverlapPolicy {
    measure: OverlapMeasure,
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    measure: OverlapMeasure,
    threshold: f64,
}

impl TryFrom<RawPolicy> for OverlapPolicy {
    type Error = GeometryError;
    fn try_from(r: RawPolicy) -> Result<Self, Self::Error> {
        OverlapPolicy::new(r.measure, r.threshold)
    }
}

impl From<OverlapPolicy> for RawPolicy {
    fn from(p: OverlapPolicy) -> Self {
        RawPolicy {
            measure: p.measure,
            threshold: p.threshold,
        }
    }
}

impl OverlapPolicy {
    pub fn new(measure: OverlapMeasure, threshold: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(GeometryError::InvalidThreshold(threshold));
        }
        Ok(Self { measure, threshold })
    }

    /// IoU at 0.4, the pretraining co-masking default.
    pub fn pretraining_default() -> Self {
        Self {
            measure: OverlapMeasure::IoU,
            threshold: 0.4,
        }
    }

    /// IoT at 0.5, the default for diagnostic co-masking.
    pub fn ablation_default() -> Self {
        Self {
            measure: OverlapMeasure::IoT,
            threshold: 0.5,
        }
    }

    pub fn measure(&self) -> OverlapMeasure {
        self.measure
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// A candidate triggers when it actually intersects the target and its
    /// overlap reaches the threshold.
    pub fn triggers(&self, target: &BoundingBox, candidate: &BoundingBox) -> bool {
        let v = self.measure.apply(target, candidate);
        v > 0.0 && v >= self.threshold
    }
}

/// Indices of every region whose overlap with `target` reaches the policy threshold.
///
/// With `threshold == 0` every intersecting region qualifies; disjoint regions never do.
pub fn comask_set(target: &BoundingBox, regions: &[BoundingBox], policy: &OverlapPolicy) -> BTreeSet<usize> {
    regions
        .iter()
        .enumerate()
        .filter(|(_, r)| policy.triggers(target, r))
        .map(|(i, _)| i)
        .collect()
}

/// Index of the proposal with the highest IoU against `gold`; lowest index wins ties.
pub fn best_match(gold: &BoundingBox, proposals: &[BoundingBox]) -> Result<usize, GeometryError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let v = iou(gold, p);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).ok_or(GeometryError::NoProposals)
}
