//! Penalized maximum-likelihood training with Adam.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;

/// A box on one trainable coordinate, in the coordinate's own (possibly log) space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    fn project(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    fn excess(&self, v: f64) -> f64 {
        if v < self.lower {
            v - self.lower
        } else if v > self.upper {
            v - self.upper
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the quadratic penalty on the distance outside each box.
    pub penalty_weight: f64,
    /// Training uses a seeded random subset of at most this many observations.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 75, penalty_weight: 100.0, max_points: 300, seed: 0 }
    }
}

/// Indices of the observations used for training: all of them, or a seeded subset.
pub fn subset_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut r = rng::keyed_stream(seed, &[rng::purpose::TRAIN_SUBSET, n as u64]);
    let mut idx = sample(&mut r, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Outcome of [`maximize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
}

/// Maximizes `f(θ) − w·Σ dist(θ_i, box_i)²` with Adam, starting from `init` projected into
/// the boxes.
///
/// The result is always inside the boxes, and its objective is never below that of the
/// projected starting point: the best projected iterate seen is returned.
pub fn maximize<F>(init: &[f64], boxes: &[Interval], cfg: &TrainConfig, mut f: F) -> Result<Trained>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if init.len() != boxes.len() {
        return Err(Error::Argument("one box per parameter expected".into()));
    }
    let penalized = |theta: &[f64], value: f64, grad: &mut [f64]| {
        let mut v = value;
        for ((t, b), g) in theta.iter().zip(boxes).zip(grad.iter_mut()) {
            let e = b.excess(*t);
            v -= cfg.penalty_weight * e * e;
            *g -= 2.0 * cfg.penalty_weight * e;
        }
        v
    };
    let start: Vec<f64> = init.iter().zip(boxes).map(|(t, b)| b.project(*t)).collect();
    let (v0, _) = f(&start)?;
    if !v0.is_finite() {
        return Err(Error::Training { epochs: 0, reason: "objective not finite at the initial point".into() });
    }
    let mut best = (start.clone(), v0);
    let mut best_iterate = (start.clone(), v0);
    let mut theta = start;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let k = theta.len();
    let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);
    for epoch in 1..=cfg.epochs {
        let (val, mut grad) = match f(&theta) {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::Training {
                    epochs: epoch,
                    reason: format!("{e}; last valid parameters {:?}", best.0),
                })
            }
        };
        let obj = penalized(&theta, val, &mut grad);
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                epochs: epoch,
                reason: format!("objective diverged; last valid parameters {:?}", best.0),
            });
        }
        if obj > best_iterate.1 {
            best_iterate = (theta.clone(), obj);
        }
        for i in 0..k {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(epoch as i32));
            let vh = v[i] / (1.0 - b2.powi(epoch as i32));
            theta[i] += cfg.learning_rate * mh / (vh.sqrt() + eps);
        }
    }
    // the final iterate has not been scored yet
    if let Ok((val, mut grad)) = f(&theta) {
        let obj = penalized(&theta, val, &mut grad);
        if obj.is_finite() && obj > best_iterate.1 {
            best_iterate = (theta, obj);
        }
    }
    let projected: Vec<f64> = best_iterate.0.iter().zip(boxes).map(|(t, b)| b.project(*t)).collect();
    if projected != best.0 {
        if let Ok((val, _)) = f(&projected) {
            if val.is_finite() && val > best.1 {
                best = (projected, val);
            }
        }
    }
    Ok(Trained { params: best.0, objective: best.1, initial_objective: v0 })
}
