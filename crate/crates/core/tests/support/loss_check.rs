//! Random toy-model instances and the finite-difference gradient check,
//! shared by the loss tests and the acceptance runner.

use gatepark::loss::{grad_loss, GridShape, GridTarget, LossWeights, TargetBox, ToyModel, ToySample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_instance(rng: &mut ChaCha8Rng) -> (ToyModel, Vec<ToySample>, LossWeights) {
    let shape = GridShape::new(
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..3),
        rng.random_range(1..4),
    )
    .unwrap();
    let fdim = rng.random_range(1..6);
    let mut model = ToyModel::zeros(fdim, shape.classes);
    model.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
    let samples = (0..rng.random_range(1..4))
        .map(|_| ToySample {
            features: (0..shape.slots())
                .map(|_| (0..fdim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            target: GridTarget {
                shape,
                cells: (0..shape.slots())
                    .map(|_| TargetBox {
                        x: rng.random_range(0.0..1.0),
                        y: rng.random_range(0.0..1.0),
                        conf: rng.random_range(0.0..1.0),
                        probs: (0..shape.classes).map(|_| rng.random_range(0.0..1.0)).collect(),
                        obj: rng.random_bool(0.5),
                    })
                    .collect(),
            },
        })
        .collect();
    let w = LossWeights::new(
        rng.random_range(0.0..3.0),
        rng.random_range(0.0..3.0),
        rng.random_range(0.0..3.0),
    )
    .unwrap();
    (model, samples, w)
}

pub fn mean_total(model: &ToyModel, batch: &[ToySample], w: LossWeights) -> f64 {
    batch
        .iter()
        .map(|s| gatepark::loss::sample_loss(model, s, w).unwrap().total)
        .sum::<f64>()
        / batch.len() as f64
}

/// Norm-wise relative error between the analytic gradient and central
/// differences with step `h`.
pub fn gradient_error(model: &ToyModel, batch: &[ToySample], w: LossWeights, h: f64) -> f64 {
    let g = grad_loss(model, batch, w).unwrap();
    let fd: Vec<f64> = (0..model.theta.len())
        .map(|i| {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.theta[i] += h;
            minus.theta[i] -= h;
            (mean_total(&plus, batch, w) - mean_total(&minus, batch, w)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}
