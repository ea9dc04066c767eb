//! Detection evaluation: IOU, greedy confidence-ordered matching,
//! all-point interpolated AP, mAP@50 and report rendering.

mod ap;
mod eval;
mod io;
mod matching;

pub use ap::{average_precision, pr_curve};
pub use eval::{evaluate, evaluate_with, ClassSummary, EvalReport, Scene};
pub use io::{load_scenes, parse_predictions, PredictionLine};
pub use matching::{match_detections, MatchResult, PredOutcome};

use thiserror::Error;

use crate::dataset::NormBBox;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate box ({0}, {1}, {2}, {3})")]
    Degenerate(f64, f64, f64, f64),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("predictions line {line}: {message}")]
    PredLine { line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// Axis-aligned box with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, MetricsError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(MetricsError::Degenerate(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Scale a normalized box to an image of `width x height` pixels.
    pub fn from_norm(b: &NormBBox, width: f64, height: f64) -> Result<Self, MetricsError> {
        let (x1, y1, x2, y2) = b.corners();
        Self::new(x1 * width, y1 * height, x2 * width, y2 * height)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: PixelBox,
    pub class_id: u32,
}

/// A prediction with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub bbox: PixelBox,
    pub class_id: u32,
    pub confidence: f64,
}

impl ScoredDetection {
    pub fn new(bbox: PixelBox, class_id: u32, confidence: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MetricsError::Confidence(confidence));
        }
        Ok(Self {
            bbox,
            class_id,
            confidence,
        })
    }
}
