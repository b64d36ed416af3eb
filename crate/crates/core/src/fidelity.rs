//! Choosing the fidelity of an already chosen input.

use crate::batch::{fantasize_pending, PendingSet};
use crate::error::{ensure, Result};
use crate::mes::{mes, MaxValueSamples};
use crate::mf_model::Surrogate;
use crate::Fidelity;

/// Default threshold level.
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Threshold levels `γ^(1)..γ^(M−1)` and, per level, the number of time points since an
/// experiment above that fidelity.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub gamma: Vec<f64>,
    pub idle: Vec<u64>,
    pub doubling: bool,
}

impl ThresholdState {
    pub fn new(fidelities: usize, gamma: f64, doubling: bool) -> Result<Self> {
        ensure(fidelities >= 1, || "at least one fidelity required".into())?;
        ensure(gamma > 0.0, || format!("threshold must be positive, got {gamma}"))?;
        Ok(ThresholdState { gamma: vec![gamma; fidelities - 1], idle: vec![0; fidelities - 1], doubling })
    }

    pub fn fidelities(&self) -> usize {
        self.gamma.len() + 1
    }
}

/// Smallest `m < M` with `√β σ^(m)(x) > γ^(m)`, else `M`.
pub fn variance_rule(x: &[f64], surrogate: &Surrogate, beta: f64, state: &ThresholdState) -> Result<Fidelity> {
    ensure(beta > 0.0, || format!("beta must be positive, got {beta}"))?;
    let top = surrogate.fidelities();
    for m in 1..top {
        if !surrogate.supports(m) {
            continue;
        }
        let (_, var) = surrogate.predict(x, m)?;
        if beta.sqrt() * var.sqrt() > state.gamma[m - 1] {
            return Ok(m);
        }
    }
    Ok(top)
}

/// One time point of bookkeeping. `activity` holds the fidelities queried at this time point;
/// `delays` the expected delays `E[τ^(1)]..E[τ^(M)]`.
///
/// When no experiment above fidelity `m` has been run for more than `τ^(m+1)/τ^(m)` time
/// points, `γ^(m)` doubles and its clock restarts.
pub fn update_thresholds(state: &ThresholdState, delays: &[f64], activity: &[Fidelity]) -> ThresholdState {
    let mut s = state.clone();
    for m in 1..s.fidelities() {
        if activity.iter().any(|&q| q > m) {
            s.idle[m - 1] = 0;
            continue;
        }
        s.idle[m - 1] += 1;
        let ratio = delays[m] / delays[m - 1];
        if s.doubling && s.idle[m - 1] as f64 > ratio {
            s.gamma[m - 1] *= 2.0;
            s.idle[m - 1] = 0;
        }
    }
    s
}

/// Delay-normalized information scores `I_m / E[τ^(m)]`, given a surrogate already
/// fantasized over the pending queries.
pub fn information_scores(fantasized: &Surrogate, x: &[f64], fstar: &MaxValueSamples, delays: &[f64]) -> Result<Vec<f64>> {
    ensure(delays.len() == fantasized.fidelities(), || "one expected delay per fidelity required".into())?;
    ensure(delays.iter().all(|d| *d > 0.0), || "expected delays must be positive".into())?;
    (1..=fantasized.fidelities())
        .map(|m| {
            if fantasized.supports(m) {
                Ok(mes(fantasized, x, m, fstar)? / delays[m - 1])
            } else {
                Ok(f64::NEG_INFINITY)
            }
        })
        .collect()
}

/// Index of the best score; ties go to the highest fidelity.
pub fn best_fidelity(scores: &[f64]) -> Fidelity {
    let mut best = scores.len();
    let mut value = f64::NEG_INFINITY;
    for (i, s) in scores.iter().enumerate() {
        if *s >= value {
            value = *s;
            best = i + 1;
        }
    }
    best
}

/// The fidelity with the largest expected information gain per unit of expected delay.
pub fn information_rule(
    x: &[f64],
    surrogate: &Surrogate,
    pending: &PendingSet,
    fstar: &MaxValueSamples,
    delays: &[f64],
    fantasies: usize,
    seed: u64,
) -> Result<Fidelity> {
    if surrogate.fidelities() == 1 {
        return Ok(1);
    }
    let f = fantasize_pending(surrogate, &pending.task_inputs(), fantasies, seed)?;
    Ok(best_fidelity(&information_scores(&f, x, fstar, delays)?))
}
