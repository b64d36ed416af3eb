//! Upper-confidence-bound acquisitions and the acquisition optimizer.

use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::mf_model::Surrogate;
use crate::{rng, Fidelity, Point};

/// Exploration weight schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    Fixed(f64),
    /// `β_t = 2 log(d t² π² / (6δ))`.
    Logarithmic { delta: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Fixed(4.0)
    }
}

impl BetaSchedule {
    pub fn beta(&self, t: usize, dim: usize) -> f64 {
        match *self {
            BetaSchedule::Fixed(b) => b,
            BetaSchedule::Logarithmic { delta } => {
                let t = t.max(1) as f64;
                let v = 2.0 * (dim.max(1) as f64 * t * t * std::f64::consts::PI.powi(2) / (6.0 * delta)).ln();
                v.max(1e-6)
            }
        }
    }
}

/// `μ + √β σ`.
pub fn ucb_value(mean: f64, variance: f64, beta: f64) -> f64 {
    mean + beta.sqrt() * variance.max(0.0).sqrt()
}

pub fn ucb(surrogate: &Surrogate, x: &[f64], m: Fidelity, beta: f64) -> Result<f64> {
    ensure(beta > 0.0, || format!("beta must be positive, got {beta}"))?;
    let (mu, var) = surrogate.predict(x, m)?;
    Ok(ucb_value(mu, var, beta))
}

/// Known bounds `ζ^(m) ≥ sup |f^(m) − f^(M)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasBounds {
    zeta: Vec<f64>,
}

impl BiasBounds {
    pub fn new(zeta: Vec<f64>) -> Result<Self> {
        ensure(!zeta.is_empty(), || "at least one bias bound required".into())?;
        ensure(zeta.iter().all(|z| *z >= 0.0 && !z.is_nan()), || "bias bounds must be nonnegative".into())?;
        ensure(zeta.windows(2).all(|w| w[0] >= w[1]), || "bias bounds must be non-increasing".into())?;
        ensure(*zeta.last().unwrap() == 0.0, || "the target fidelity has zero bias".into())?;
        Ok(BiasBounds { zeta })
    }

    pub fn zero(fidelities: usize) -> Self {
        BiasBounds { zeta: vec![0.0; fidelities] }
    }

    pub fn values(&self) -> &[f64] {
        &self.zeta
    }
}

/// `min_m [μ^(m)(x) + √β σ^(m)(x) + ζ^(m)]` over the fidelities the surrogate models.
pub fn mf_ucb(surrogate: &Surrogate, x: &[f64], bias: &BiasBounds, beta: f64) -> Result<f64> {
    ensure(bias.zeta.len() == surrogate.fidelities(), || "one bias bound per fidelity expected".into())?;
    let mut best = f64::INFINITY;
    for m in 1..=surrogate.fidelities() {
        if surrogate.supports(m) {
            best = best.min(ucb(surrogate, x, m, beta)? + bias.zeta[m - 1]);
        }
    }
    Ok(best)
}

/// A scalar function on the unit box to be maximized.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Value and gradient; by default the gradient is a central finite difference.
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.value(x)?;
        let step = 1e-6;
        let mut g = vec![0.0; x.len()];
        let mut p = x.to_vec();
        for i in 0..x.len() {
            let (lo, hi) = ((x[i] - step).max(0.0), (x[i] + step).min(1.0));
            p[i] = hi;
            let up = self.value(&p)?;
            p[i] = lo;
            let dn = self.value(&p)?;
            p[i] = x[i];
            g[i] = if hi > lo { (up - dn) / (hi - lo) } else { 0.0 };
        }
        Ok((v, g))
    }
}

impl<F: Fn(&[f64]) -> Result<f64>> Objective for F {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self(x)
    }
}

/// UCB at a fixed fidelity, with analytic gradient.
pub struct Ucb<'a> {
    pub surrogate: &'a Surrogate,
    pub fidelity: Fidelity,
    pub beta: f64,
}

impl Objective for Ucb<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        ucb(self.surrogate, x, self.fidelity, self.beta)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        ucb_with_grad(self.surrogate, x, self.fidelity, self.beta)
    }
}

fn ucb_with_grad(s: &Surrogate, x: &[f64], m: Fidelity, beta: f64) -> Result<(f64, Vec<f64>)> {
    let p = s.predict_with_grad(x, m)?;
    let sd = p.variance.sqrt();
    let rb = beta.sqrt();
    let g = p
        .mean_grad
        .iter()
        .zip(&p.variance_grad)
        .map(|(dm, dv)| dm + if sd > 1e-12 { rb * dv / (2.0 * sd) } else { 0.0 })
        .collect();
    Ok((p.mean + rb * sd, g))
}

/// The multi-fidelity UCB bound, with the gradient of the active (minimal) term.
pub struct MfUcb<'a> {
    pub surrogate: &'a Surrogate,
    pub bias: &'a BiasBounds,
    pub beta: f64,
}

impl Objective for MfUcb<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        mf_ucb(self.surrogate, x, self.bias, self.beta)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for m in 1..=self.surrogate.fidelities() {
            if !self.surrogate.supports(m) {
                continue;
            }
            let (v, g) = ucb_with_grad(self.surrogate, x, m, self.beta)?;
            let v = v + self.bias.zeta[m - 1];
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, g));
            }
        }
        best.ok_or_else(|| Error::Argument("surrogate models no fidelity".into()))
    }
}

/// Search domain: the unit box or an explicit finite set of feasible points.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    UnitBox { dim: usize },
    Grid(Arc<Vec<Point>>),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::UnitBox { dim } => *dim,
            Domain::Grid(g) => g.first().map_or(0, Vec::len),
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, Domain::Grid(_))
    }

    /// A uniformly random feasible point.
    pub fn random_point<R: rand::Rng>(&self, r: &mut R) -> Point {
        match self {
            Domain::UnitBox { dim } => rng::uniform_point(r, *dim),
            Domain::Grid(g) => g[r.random_range(0..g.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Number of uniformly random screening points on a box domain.
    pub screen_size: usize,
    /// Gradient refinements started from the best screening points.
    pub starts: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl OptimizerConfig {
    pub fn with_screen(screen_size: usize) -> Self {
        OptimizerConfig { screen_size, starts: 10, learning_rate: 0.01, epochs: 75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub point: Point,
    pub value: f64,
    /// Index of the screening or grid point the optimum came from.
    pub index: usize,
}

/// Index of the largest value; the lowest index wins ties and NaN never wins.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Maximizes `obj` over `domain`.
///
/// Box domains are screened with `cfg.screen_size` uniform points drawn from `seed`, then
/// refined by projected Adam from the best `cfg.starts` of them. Grid domains are searched
/// exhaustively.
pub fn optimize_acquisition(obj: &dyn Objective, domain: &Domain, cfg: &OptimizerConfig, seed: u64) -> Result<Optimum> {
    match domain {
        Domain::Grid(g) => {
            ensure(!g.is_empty(), || "empty domain".into())?;
            let values = g.iter().map(|x| obj.value(x)).collect::<Result<Vec<_>>>()?;
            grid_argmax(g, &values)
        }
        Domain::UnitBox { dim } => {
            ensure(*dim > 0 && cfg.screen_size > 0, || "empty domain".into())?;
            let screen = rng::uniform_points(&mut rng::stream(seed), *dim, cfg.screen_size);
            let values = screen.iter().map(|x| obj.value(x)).collect::<Result<Vec<_>>>()?;
            refine_from_screen(obj, &screen, &values, cfg)
        }
    }
}

pub fn grid_argmax(grid: &[Point], values: &[f64]) -> Result<Optimum> {
    let i = argmax(values).ok_or_else(|| Error::NonFinite("acquisition values on the grid".into()))?;
    Ok(Optimum { point: grid[i].clone(), value: values[i], index: i })
}

/// Refines the best `cfg.starts` screening points and returns the overall best point.
/// A refined point replaces the screening optimum only if strictly better.
pub fn refine_from_screen(obj: &dyn Objective, screen: &[Point], values: &[f64], cfg: &OptimizerConfig) -> Result<Optimum> {
    let mut best = grid_argmax(screen, values)?;
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    for &i in order.iter().take(cfg.starts) {
        if let Some((x, v)) = adam_ascent(obj, &screen[i], values[i], cfg)? {
            if v > best.value {
                best = Optimum { point: x, value: v, index: i };
            }
        }
    }
    Ok(best)
}

fn adam_ascent(obj: &dyn Objective, start: &[f64], start_value: f64, cfg: &OptimizerConfig) -> Result<Option<(Point, f64)>> {
    let mut x = start.to_vec();
    let mut best: Option<(Point, f64)> = None;
    let mut best_v = start_value;
    let d = x.len();
    let (mut m, mut v) = (vec![0.0; d], vec![0.0; d]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for epoch in 1..=cfg.epochs {
        let (val, g) = obj.value_and_grad(&x)?;
        if val.is_finite() && val > best_v {
            best_v = val;
            best = Some((x.clone(), val));
        }
        if g.iter().any(|v| !v.is_finite()) || g.iter().all(|v| *v == 0.0) {
            break;
        }
        for i in 0..d {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(epoch as i32));
            let vh = v[i] / (1.0 - b2.powi(epoch as i32));
            x[i] = (x[i] + cfg.learning_rate * mh / (vh.sqrt() + eps)).clamp(0.0, 1.0);
        }
    }
    let val = obj.value(&x)?;
    if val.is_finite() && val > best_v {
        best = Some((x, val));
    }
    Ok(best)
}
