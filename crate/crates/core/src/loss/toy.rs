use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    loss_total, CellBox, GridShape, GridTarget, LossBreakdown, LossError, LossWeights, PredGrid, Result, TargetBox,
};
use crate::par::{self, Exec};

/// Linear per-slot predictor: `output = W · features`, outputs ordered
/// `(x, y, C, p_0 .. p_{K-1})`. `theta` is `W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub feature_dim: usize,
    pub classes: usize,
    pub theta: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            feature_dim,
            classes,
            theta: vec![0.0; (3 + classes) * feature_dim],
        }
    }

    pub fn outputs(&self) -> usize {
        3 + self.classes
    }

    fn predict_slot(&self, features: &[f64]) -> CellBox {
        let f = self.feature_dim;
        let row = |k: usize| -> f64 {
            self.theta[k * f..(k + 1) * f]
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum()
        };
        CellBox {
            x: row(0),
            y: row(1),
            conf: row(2),
            probs: (0..self.classes).map(|c| row(3 + c)).collect(),
        }
    }

    pub fn predict(&self, sample: &ToySample) -> PredGrid {
        PredGrid {
            shape: sample.target.shape,
            cells: sample.features.iter().map(|f| self.predict_slot(f)).collect(),
        }
    }

    fn check(&self, sample: &ToySample) -> Result<()> {
        let shape = sample.target.shape;
        if sample.features.len() != shape.slots() || sample.target.cells.len() != shape.slots() {
            return Err(LossError::Shape("sample slot count".into()));
        }
        if shape.classes != self.classes {
            return Err(LossError::Shape(format!(
                "model has {} classes, sample {}",
                self.classes, shape.classes
            )));
        }
        if sample.features.iter().any(|f| f.len() != self.feature_dim) {
            return Err(LossError::Shape("feature dimension".into()));
        }
        if self.theta.len() != self.outputs() * self.feature_dim {
            return Err(LossError::Shape("parameter vector length".into()));
        }
        Ok(())
    }
}

/// One training image: a feature vector per slot and the grid target.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub features: Vec<Vec<f64>>,
    pub target: GridTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub feature_dim: usize,
    pub classes: usize,
    pub samples: Vec<ToySample>,
}

pub fn sample_loss(model: &ToyModel, sample: &ToySample, weights: LossWeights) -> Result<LossBreakdown> {
    model.check(sample)?;
    loss_total(&model.predict(sample), &sample.target, weights)
}

fn sample_grad(model: &ToyModel, sample: &ToySample, w: LossWeights) -> Vec<f64> {
    let f = model.feature_dim;
    let mut g = vec![0.0; model.theta.len()];
    for (features, t) in sample.features.iter().zip(&sample.target.cells) {
        let p = model.predict_slot(features);
        let obj = if t.obj { 1.0 } else { 0.0 };
        let mut dout = Vec::with_capacity(model.outputs());
        dout.push(2.0 * w.loc * obj * (p.x - t.x));
        dout.push(2.0 * w.loc * obj * (p.y - t.y));
        dout.push(2.0 * w.obj * (p.conf - t.conf));
        for (pc, tc) in p.probs.iter().zip(&t.probs) {
            dout.push(2.0 * w.cls * obj * (pc - tc));
        }
        for (k, d) in dout.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (gi, x) in g[k * f..(k + 1) * f].iter_mut().zip(features) {
                *gi += d * x;
            }
        }
    }
    g
}

/// [`grad_loss_with`] using the default execution mode.
pub fn grad_loss(model: &ToyModel, batch: &[ToySample], weights: LossWeights) -> Result<Vec<f64>> {
    grad_loss_with(Exec::default(), model, batch, weights)
}

/// Gradient of the batch-mean total loss with respect to `theta`.
/// Per-sample gradients may be computed in parallel; they are summed in
/// batch order.
pub fn grad_loss_with(exec: Exec, model: &ToyModel, batch: &[ToySample], weights: LossWeights) -> Result<Vec<f64>> {
    let weights = LossWeights::new(weights.loc, weights.obj, weights.cls)?;
    for s in batch {
        model.check(s)?;
    }
    let mut total = vec![0.0; model.theta.len()];
    if batch.is_empty() {
        return Ok(total);
    }
    for g in par::map(exec, batch, |s| sample_grad(model, s, weights)) {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    let n = batch.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    Ok(total)
}

/// Batch-mean loss components after an epoch (epoch 0 is the initial model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loc: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<EpochLoss>,
}

fn mean_loss(model: &ToyModel, data: &ToyDataset, w: LossWeights, epoch: usize) -> Result<EpochLoss> {
    let mut acc = EpochLoss {
        epoch,
        loc: 0.0,
        obj: 0.0,
        cls: 0.0,
        total: 0.0,
    };
    for s in &data.samples {
        let b = sample_loss(model, s, w)?;
        acc.loc += b.loc;
        acc.obj += b.obj;
        acc.cls += b.cls;
        acc.total += b.total;
    }
    let n = data.samples.len().max(1) as f64;
    acc.loc /= n;
    acc.obj /= n;
    acc.cls /= n;
    acc.total /= n;
    if !acc.total.is_finite() {
        return Err(LossError::Diverged { epoch, loss: acc.total });
    }
    Ok(acc)
}

/// Plain SGD: every epoch visits the samples in a freshly shuffled order
/// (seeded) and applies one update per sample. The returned trace holds
/// the initial loss followed by the loss after each epoch.
pub fn toy_train(
    mut model: ToyModel,
    data: &ToyDataset,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
    weights: LossWeights,
) -> Result<TrainOutcome> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(LossError::LearningRate(learning_rate));
    }
    let weights = LossWeights::new(weights.loc, weights.obj, weights.cls)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut trace = vec![mean_loss(&model, data, weights, 0)?];
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let sample = &data.samples[i];
            model.check(sample)?;
            let g = sample_grad(&model, sample, weights);
            for (t, d) in model.theta.iter_mut().zip(g) {
                *t -= learning_rate * d;
            }
        }
        trace.push(mean_loss(&model, data, weights, epoch)?);
    }
    Ok(TrainOutcome { model, trace })
}

/// CSV with header `epoch,loc,obj,cls,total`.
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,loc,obj,cls,total\n");
    for e in trace {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.loc, e.obj, e.cls, e.total);
    }
    out
}

/// Synthetic training set on a 4x4 grid with one box per cell and two
/// classes.
///
/// Each slot has the features `[1, obj, class0, class1, a1, a2, a3]`, where
/// `obj` and the class one-hot mimic a detector's feature map and `a*` are
/// uniform in `[-1, 1]`. Targets are linear in the features, so a zero-loss
/// parameter vector exists:
/// `x̂ = 0.5 + 0.3 a1 − 0.2 a2`, `ŷ = 0.5 + 0.25 a3 + 0.1 a1`,
/// `Ĉ = obj`, `p̂ = class one-hot` (object slots only).
pub fn synthetic_grid_set(images: usize, seed: u64) -> ToyDataset {
    let shape = GridShape::new(4, 4, 1, 2).expect("valid shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..images)
        .map(|_| {
            let mut features = Vec::with_capacity(shape.slots());
            let mut cells = Vec::with_capacity(shape.slots());
            for _ in 0..shape.slots() {
                let obj = rng.random_bool(0.35);
                let class = rng.random_range(0..2usize);
                let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let onehot = |c: usize| if obj && class == c { 1.0 } else { 0.0 };
                features.push(vec![
                    1.0,
                    if obj { 1.0 } else { 0.0 },
                    onehot(0),
                    onehot(1),
                    a[0],
                    a[1],
                    a[2],
                ]);
                cells.push(if obj {
                    TargetBox {
                        x: 0.5 + 0.3 * a[0] - 0.2 * a[1],
                        y: 0.5 + 0.25 * a[2] + 0.1 * a[0],
                        conf: 1.0,
                        probs: vec![onehot(0), onehot(1)],
                        obj: true,
                    }
                } else {
                    TargetBox {
                        x: 0.0,
                        y: 0.0,
                        conf: 0.0,
                        probs: vec![0.0, 0.0],
                        obj: false,
                    }
                });
            }
            ToySample {
                features,
                target: GridTarget { shape, cells },
            }
        })
        .collect();
    ToyDataset {
        feature_dim: 7,
        classes: 2,
        samples,
    }
}
