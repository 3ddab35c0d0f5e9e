//! Geometry and temporal-alignment primitives shared by rewards and metrics.
//!
//! Boxes are always stored in normalized `[0, 1]` image coordinates; the
//! trace parser is responsible for canonicalizing whatever convention a
//! model emits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by temporal alignment.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroundingError {
    #[error("ground truth has no temporal positions to match against")]
    EmptyGroundTruth,
    #[error("invalid box [{0}]: corners must satisfy x1 <= x2, y1 <= y2 within [0, 1]")]
    InvalidBox(String),
    #[error("invalid interval [{0}, {1}]: start must not exceed end")]
    InvalidInterval(String, String),
}

/// Axis-aligned box in normalized image coordinates.
///
/// Serialized as a four-element array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GroundingError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if [x1, y1, x2, y2].iter().all(|v| in_unit(*v)) && x1 <= x2 && y1 <= y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(GroundingError::InvalidBox(format!("{x1}, {y1}, {x2}, {y2}")))
        }
    }

    /// The whole frame.
    pub const FULL: BoundingBox = BoundingBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GroundingError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Closed time interval `[start, end]` in seconds. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self, GroundingError> {
        if start.is_finite() && end.is_finite() && start <= end {
            Ok(Self { start, end })
        } else {
            Err(GroundingError::InvalidInterval(start.to_string(), end.to_string()))
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = GroundingError;

    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

/// Annotated ground-truth temporal positions and (optionally) intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalAnnotation {
    #[serde(default)]
    pub positions: Vec<f64>,
    #[serde(default)]
    pub intervals: Vec<Interval>,
}

impl TemporalAnnotation {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty() && self.intervals.is_empty()
    }

    /// Positions used for nearest-timestamp matching. Explicit positions win;
    /// interval-only annotations fall back to the interval endpoints.
    pub fn anchor_positions(&self) -> Vec<f64> {
        if !self.positions.is_empty() {
            return self.positions.clone();
        }
        self.intervals
            .iter()
            .flat_map(|i| [i.start, i.end])
            .collect()
    }

    pub fn in_any_interval(&self, t: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(t))
    }
}

/// One ground-truth object at a keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
}

/// Ground-truth objects annotated on one keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeObjects {
    pub timestamp: f64,
    /// Index of the keyframe within the sample's frame listing, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<usize>,
    pub objects: Vec<GtObject>,
}

impl KeyframeObjects {
    pub fn all_boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.objects.iter().flat_map(|o| o.boxes.iter())
    }
}

/// Finds the keyframe record annotated at `t`.
pub fn keyframe_at(keyframes: &[KeyframeObjects], t: f64) -> Option<&KeyframeObjects> {
    const EPS: f64 = 1e-9;
    keyframes.iter().find(|k| (k.timestamp - t).abs() <= EPS)
}

/// Standard intersection-over-union. Zero-area unions score 0.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// One-dimensional IoU of two intervals. Zero-length unions score 0.
pub fn interval_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Nearest ground-truth position to `t` and the absolute deviation.
///
/// Equidistant positions resolve to the smaller timestamp.
pub fn match_timestamp(t: f64, gt: &TemporalAnnotation) -> Result<(f64, f64), GroundingError> {
    nearest_position(t, &gt.anchor_positions())
}

pub(crate) fn nearest_position(t: f64, positions: &[f64]) -> Result<(f64, f64), GroundingError> {
    let mut best: Option<(f64, f64)> = None;
    for &p in positions {
        let d = (t - p).abs();
        best = match best {
            None => Some((p, d)),
            Some((bp, bd)) if d < bd || (d == bd && p < bp) => Some((p, d)),
            keep => keep,
        };
    }
    best.ok_or(GroundingError::EmptyGroundTruth)
}
