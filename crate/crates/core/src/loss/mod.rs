//! Reference implementation of the composite detection loss
//!
//! ```text
//! L = λ_loc · L_loc + λ_obj · L_obj + λ_cls · L_cls
//! L_loc = Σ_obj (x − x̂)² + (y − ŷ)²          centers only
//! L_obj = E1 + E2
//!   E1  = Σ_obj   (C − Ĉ)²
//!   E2  = Σ_noobj (C − Ĉ)²                    no separate noobj weight
//! L_cls = Σ_obj Σ_c (p(c) − p̂(c))²
//! ```
//!
//! summed over every (cell, box) slot of the grid, together with a linear
//! per-cell predictor whose parameters are fitted by plain SGD. The
//! predictor has no activation, so the objective is exactly quadratic and
//! the analytic gradient is closed form.

mod grid;
mod toy;

pub use grid::{parse_grid, CellBox, GridFile, GridShape, GridTarget, PredGrid, TargetBox};
pub use toy::{
    grad_loss, grad_loss_with, sample_loss, synthetic_grid_set, toy_train, trace_csv, EpochLoss, ToyDataset, ToyModel,
    ToySample, TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss weights must be non-negative and finite, got {0:?}")]
    Weights([f64; 3]),
    #[error("grid file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// `λ_loc`, `λ_obj`, `λ_cls`; all non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub obj: f64,
    pub cls: f64,
}

impl LossWeights {
    pub fn new(loc: f64, obj: f64, cls: f64) -> Result<Self> {
        if [loc, obj, cls].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(Self { loc, obj, cls })
        } else {
            Err(LossError::Weights([loc, obj, cls]))
        }
    }

    /// Parse `a,b,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().unwrap_or(f64::NAN)).collect();
        match v[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(LossError::Weights([f64::NAN; 3])),
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 1.0,
            obj: 1.0,
            cls: 1.0,
        }
    }
}

/// Component losses and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loc: f64,
    pub obj_e1: f64,
    pub obj_e2: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

fn check_shapes(pred: &PredGrid, target: &GridTarget) -> Result<()> {
    if pred.shape != target.shape {
        return Err(LossError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape, target.shape
        )));
    }
    let k = pred.shape.classes;
    if let Some(bad) = pred.cells.iter().position(|c| c.probs.len() != k) {
        return Err(LossError::Shape(format!("prediction slot {bad} class count")));
    }
    if let Some(bad) = target.cells.iter().position(|c| c.probs.len() != k) {
        return Err(LossError::Shape(format!("target slot {bad} class count")));
    }
    Ok(())
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Sum over object slots of the squared center error.
pub fn loss_localization(pred: &PredGrid, target: &GridTarget) -> Result<f64> {
    check_shapes(pred, target)?;
    Ok(pred
        .cells
        .iter()
        .zip(&target.cells)
        .filter(|(_, t)| t.obj)
        .map(|(p, t)| sq(p.x - t.x) + sq(p.y - t.y))
        .sum())
}

/// `(E1, E2, E1 + E2)`: squared objectness error over object and
/// no-object slots.
pub fn loss_objectness(pred: &PredGrid, target: &GridTarget) -> Result<(f64, f64, f64)> {
    check_shapes(pred, target)?;
    let (mut e1, mut e2) = (0.0, 0.0);
    for (p, t) in pred.cells.iter().zip(&target.cells) {
        let d = sq(p.conf - t.conf);
        if t.obj {
            e1 += d;
        } else {
            e2 += d;
        }
    }
    Ok((e1, e2, e1 + e2))
}

/// Sum over object slots of the squared class-probability error.
pub fn loss_classification(pred: &PredGrid, target: &GridTarget) -> Result<f64> {
    check_shapes(pred, target)?;
    Ok(pred
        .cells
        .iter()
        .zip(&target.cells)
        .filter(|(_, t)| t.obj)
        .map(|(p, t)| p.probs.iter().zip(&t.probs).map(|(a, b)| sq(a - b)).sum::<f64>())
        .sum())
}

pub fn loss_total(pred: &PredGrid, target: &GridTarget, weights: LossWeights) -> Result<LossBreakdown> {
    let weights = LossWeights::new(weights.loc, weights.obj, weights.cls)?;
    let loc = loss_localization(pred, target)?;
    let (obj_e1, obj_e2, obj) = loss_objectness(pred, target)?;
    let cls = loss_classification(pred, target)?;
    Ok(LossBreakdown {
        loc,
        obj_e1,
        obj_e2,
        obj,
        cls,
        total: weights.loc * loc + weights.obj * obj + weights.cls * cls,
    })
}
