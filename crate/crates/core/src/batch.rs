//! Asynchronous batching: local penalization, fantasies, Thompson sampling, trust regions.

use faer::Mat;

use crate::acquisition::{argmax, Domain};
use crate::error::{ensure, Error, Result};
use crate::linalg::Cholesky;
use crate::mf_model::{FidelityDataset, GridSampler, Surrogate, TaskInput};
use crate::{rng, Fidelity, Point};

/// An experiment in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingQuery {
    pub id: u64,
    pub x: Point,
    pub fidelity: Fidelity,
    pub submitted: u64,
    pub arrival: u64,
    pub space: f64,
}

/// The experiments in flight, in submission order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PendingSet {
    queries: Vec<PendingQuery>,
}

impl PendingSet {
    pub fn new() -> Self {
        PendingSet::default()
    }

    pub fn insert(&mut self, q: PendingQuery) -> Result<()> {
        ensure(!self.queries.iter().any(|p| p.id == q.id), || format!("duplicate query id {}", q.id))?;
        ensure(q.arrival > q.submitted, || "arrival must come after submission".into())?;
        self.queries.push(q);
        Ok(())
    }

    /// Removes and returns the queries arriving at or before `t`, in submission order.
    pub fn take_arrived(&mut self, t: u64) -> Vec<PendingQuery> {
        let (done, rest): (Vec<_>, Vec<_>) = self.queries.drain(..).partition(|q| q.arrival <= t);
        self.queries = rest;
        done
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingQuery> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn total_space(&self) -> f64 {
        self.queries.iter().map(|q| q.space).sum()
    }

    pub fn count_at(&self, m: Fidelity) -> usize {
        self.queries.iter().filter(|q| q.fidelity == m).count()
    }

    pub fn task_inputs(&self) -> Vec<TaskInput> {
        self.queries.iter().map(|q| (q.x.clone(), q.fidelity)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizerParams {
    /// L̂ > 0.
    pub lipschitz: f64,
    /// P̂, the estimated maximum.
    pub max_estimate: f64,
    pub local: bool,
}

/// Floor of the Lipschitz estimate.
pub const LIPSCHITZ_FLOOR: f64 = 1e-4;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// The exclusion ball around one pending point: `ψ(x) = min{‖x − c‖ / r, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    /// `r = max(P̂ − μ, 0)/L̂ + σ/L̂` from the posterior at the pending point.
    pub fn new(center: Point, mean: f64, sd: f64, params: &PenalizerParams) -> Self {
        let radius = (params.max_estimate - mean).max(0.0) / params.lipschitz + sd.max(0.0) / params.lipschitz;
        Ball { center, radius }
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        let d = distance(x, &self.center);
        if self.radius <= 0.0 || !self.radius.is_finite() {
            // degenerate ball: only the pending point itself is excluded
            return if d == 0.0 { 0.0 } else { 1.0 };
        }
        (d / self.radius).min(1.0)
    }

    /// Adds `∇ψ(x)/ψ(x)`-free gradient: returns `(ψ, ∇ψ)`.
    fn penalty_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = distance(x, &self.center);
        let p = self.penalty(x);
        let g = if p < 1.0 && d > 0.0 && self.radius > 0.0 {
            x.iter().zip(&self.center).map(|(a, c)| (a - c) / (d * self.radius)).collect()
        } else {
            vec![0.0; x.len()]
        };
        (p, g)
    }
}

/// `min{‖x − x_j‖ / (E[r_j] + σ(x_j)/L̂), 1}` with `E[r_j] = max(P̂ − μ(x_j), 0)/L̂`.
pub fn hard_penalizer(x: &[f64], xj: &[f64], surrogate: &Surrogate, m: Fidelity, params: &PenalizerParams) -> Result<f64> {
    ensure(params.lipschitz > 0.0, || "Lipschitz estimate must be positive".into())?;
    let (mu, var) = surrogate.predict(xj, m)?;
    Ok(Ball::new(xj.to_vec(), mu, var.sqrt(), params).penalty(x))
}

/// How a raw acquisition value is made positive before penalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// For acquisitions that are guaranteed positive.
    Identity,
    /// `g(z) = log(1 + e^z)`.
    Softplus,
}

impl Transform {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Transform::Identity => z,
            Transform::Softplus => softplus(z),
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

/// `g(α(x)) · Π_q ψ_q(x)`.
pub fn penalized_acquisition(base: f64, x: &[f64], balls: &[Ball], transform: Transform) -> f64 {
    balls.iter().fold(transform.apply(base), |acc, b| acc * b.penalty(x))
}

/// Value and gradient of [`penalized_acquisition`], given the base value and gradient.
pub fn penalized_value_and_grad(base: f64, base_grad: &[f64], x: &[f64], balls: &[Ball], transform: Transform) -> (f64, Vec<f64>) {
    let gv = transform.apply(base);
    let dg = transform.derivative(base);
    let parts: Vec<(f64, Vec<f64>)> = balls.iter().map(|b| b.penalty_and_grad(x)).collect();
    let prod: f64 = parts.iter().map(|p| p.0).product();
    let mut grad: Vec<f64> = base_grad.iter().map(|g| dg * g * prod).collect();
    for (i, (_, gi)) in parts.iter().enumerate() {
        if gi.iter().all(|v| *v == 0.0) {
            continue;
        }
        let others: f64 = parts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.0).product();
        for (g, d) in grad.iter_mut().zip(gi) {
            *g += gv * others * d;
        }
    }
    (gv * prod, grad)
}

/// Screening settings of the Lipschitz estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConfig {
    /// Screening points per input dimension.
    pub points_per_dim: usize,
    /// Half-width of the local box around a pending point.
    pub local_half_width: f64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        LipschitzConfig { points_per_dim: 500, local_half_width: 0.1 }
    }
}

/// Screening points for the Lipschitz estimate: the unit box, or a box around `center`.
pub fn lipschitz_screen(dim: usize, center: Option<&[f64]>, cfg: &LipschitzConfig, seed: u64) -> Vec<Point> {
    let mut r = rng::keyed_stream(seed, &[rng::purpose::LIPSCHITZ]);
    let mut pts = rng::uniform_points(&mut r, dim, cfg.points_per_dim * dim);
    if let Some(c) = center {
        for p in pts.iter_mut() {
            for (v, ci) in p.iter_mut().zip(c) {
                let lo = (ci - cfg.local_half_width).max(0.0);
                let hi = (ci + cfg.local_half_width).min(1.0);
                *v = lo + (hi - lo) * *v;
            }
        }
    }
    pts
}

/// `max ‖∇μ^(m)‖` over `screen`, floored.
pub fn lipschitz_over(surrogate: &Surrogate, m: Fidelity, screen: &[Point]) -> Result<f64> {
    let mut l: f64 = LIPSCHITZ_FLOOR;
    for x in screen {
        let g = surrogate.mean_gradient(x, m)?;
        l = l.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(l)
}

/// P̂ is the best observation at fidelity `m`; L̂ the largest posterior-mean gradient norm
/// over the domain (global) or over a box around `xj` (local).
pub fn estimate_penalizer_params(
    surrogate: &Surrogate,
    data: &FidelityDataset,
    xj: &[f64],
    m: Fidelity,
    local: bool,
    cfg: &LipschitzConfig,
    seed: u64,
) -> Result<PenalizerParams> {
    let max_estimate = data.best(m).ok_or_else(|| Error::Estimation(format!("no observations at fidelity {m}")))?;
    let screen = lipschitz_screen(xj.len(), local.then_some(xj), cfg, seed);
    Ok(PenalizerParams { lipschitz: lipschitz_over(surrogate, m, &screen)?, max_estimate, local })
}

/// Conditions `surrogate` on `count` joint posterior draws of the observations at `pending`.
///
/// Draws are `f̃ + η ε` with `f̃` a joint latent sample; all fantasies share one factor.
pub fn fantasize_pending(surrogate: &Surrogate, pending: &[TaskInput], count: usize, seed: u64) -> Result<Surrogate> {
    ensure(count >= 1, || "at least one fantasy required".into())?;
    let pending: Vec<TaskInput> = pending.iter().filter(|p| surrogate.supports(p.1)).cloned().collect();
    if pending.is_empty() {
        return Ok(surrogate.clone());
    }
    let (mean, cov) = surrogate.joint(&pending)?;
    let q = pending.len();
    let scale = (0..q).map(|i| cov[(i, i)]).fold(0.0, f64::max).max(1e-12);
    let chol = Cholesky::factor(&cov, scale)?;
    let l = chol.l();
    let mut r = rng::keyed_stream(seed, &[rng::purpose::FANTASY]);
    let mut vals = Mat::zeros(q, count);
    for s in 0..count {
        let z = rng::standard_normals(&mut r, q);
        let e = rng::standard_normals(&mut r, q);
        for i in 0..q {
            let latent: f64 = mean[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>();
            vals[(i, s)] = latent + surrogate.noise(pending[i].1).sqrt() * e[i];
        }
    }
    surrogate.fantasize(&pending, &vals)
}

/// `(1/S) Σ_s α(x, m | D ∪ fantasy_s)`.
///
/// `base` must average over the target sets of the surrogate it is given (as
/// [`crate::mes::mes`] and [`ucb_over_sets`] do).
pub fn fantasized_acquisition(
    x: &[f64],
    m: Fidelity,
    surrogate: &Surrogate,
    pending: &PendingSet,
    count: usize,
    seed: u64,
    base: &dyn Fn(&Surrogate, &[f64], Fidelity) -> Result<f64>,
) -> Result<f64> {
    let f = fantasize_pending(surrogate, &pending.task_inputs(), count, seed)?;
    base(&f, x, m)
}

/// UCB averaged over the target sets of a (possibly fantasized) surrogate.
pub fn ucb_over_sets(surrogate: &Surrogate, x: &[f64], m: Fidelity, beta: f64) -> Result<f64> {
    let (means, var) = surrogate.predict_sets(x, m)?;
    Ok(means.iter().sum::<f64>() / means.len() as f64 + beta.sqrt() * var.sqrt())
}

/// Argmax over `grid` of one posterior sample of the target fidelity.
pub fn thompson_select(surrogate: &Surrogate, grid: &[Point], seed: u64) -> Result<Point> {
    let sampler = GridSampler::new(surrogate, grid, surrogate.fidelities(), crate::mf_model::GRID_CAP)?;
    Ok(thompson_from(&sampler, grid, seed))
}

pub fn thompson_from(sampler: &GridSampler, grid: &[Point], seed: u64) -> Point {
    let draw = sampler.sample_seeded(rng::derive_seed(seed, &[rng::purpose::THOMPSON]));
    grid[argmax(&draw).unwrap_or(0)].clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionConfig {
    pub success_threshold: usize,
    pub failure_threshold: usize,
    pub initial_edge: f64,
    pub min_edge: f64,
    pub max_edge: f64,
}

impl TrustRegionConfig {
    /// Failure threshold `max(4, ⌈d / batch⌉)`.
    pub fn new(dim: usize, batch: usize) -> Self {
        TrustRegionConfig {
            success_threshold: 3,
            failure_threshold: 4.max(dim.div_ceil(batch.max(1))),
            initial_edge: 0.8,
            min_edge: 2f64.powi(-7),
            max_edge: 1.6,
        }
    }
}

/// Candidate-grid size inside a trust region: `min(5000, max(2000, 200 d))`.
pub fn trust_grid_size(dim: usize) -> usize {
    5000.min(2000.max(200 * dim))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegion {
    pub center: Point,
    pub edges: Vec<f64>,
    pub successes: usize,
    pub failures: usize,
    /// Best target-fidelity observation so far.
    pub best: Option<f64>,
    /// Number of restarts so far.
    pub restarts: usize,
    pub config: TrustRegionConfig,
}

impl TrustRegion {
    pub fn new(center: Point, config: TrustRegionConfig) -> Self {
        let edges = vec![config.initial_edge; center.len()];
        TrustRegion { center, edges, successes: 0, failures: 0, best: None, restarts: 0, config }
    }

    /// Lower and upper corners of the region intersected with the unit box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.center.iter().zip(&self.edges).map(|(c, e)| (c - e / 2.0).max(0.0)).collect();
        let hi = self.center.iter().zip(&self.edges).map(|(c, e)| (c + e / 2.0).min(1.0)).collect();
        (lo, hi)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.bounds();
        x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Region reset to the initial edge around the same center.
    pub fn restarted(&self) -> TrustRegion {
        TrustRegion {
            edges: vec![self.config.initial_edge; self.center.len()],
            successes: 0,
            failures: 0,
            restarts: self.restarts + 1,
            ..self.clone()
        }
    }

    /// Candidate points of the region: a shifted Sobol grid on box domains, the grid
    /// points inside the region on grid domains.
    pub fn candidates(&self, domain: &Domain, size: usize, seed: u64) -> Result<Vec<Point>> {
        let (lo, hi) = self.bounds();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::TrustRegion);
        }
        match domain {
            Domain::UnitBox { dim } => {
                let shift = rng::derive_seed(seed, &[rng::purpose::TRUST_GRID]);
                Ok(rng::sobol_points(*dim, size, Some(shift))
                    .into_iter()
                    .map(|p| p.iter().enumerate().map(|(i, u)| lo[i] + (hi[i] - lo[i]) * u).collect())
                    .collect())
            }
            Domain::Grid(g) => {
                let inside: Vec<Point> = g.iter().filter(|x| self.contains(x)).cloned().collect();
                if inside.is_empty() {
                    return Err(Error::TrustRegion);
                }
                if inside.len() <= size {
                    return Ok(inside);
                }
                let mut r = rng::keyed_stream(seed, &[rng::purpose::TRUST_GRID]);
                let mut idx = rand::seq::index::sample(&mut r, inside.len(), size).into_vec();
                idx.sort_unstable();
                Ok(idx.into_iter().map(|i| inside[i].clone()).collect())
            }
        }
    }
}

/// Applies one observation. Observations below the target fidelity leave the region as is.
pub fn turbo_update(tr: &TrustRegion, x: &[f64], y: f64, m: Fidelity, target: Fidelity) -> TrustRegion {
    let mut t = tr.clone();
    if m != target {
        return t;
    }
    if t.best.is_none_or(|b| y > b) {
        t.best = Some(y);
        t.center = x.to_vec();
        t.successes += 1;
        t.failures = 0;
    } else {
        t.failures += 1;
        t.successes = 0;
    }
    if t.successes >= t.config.success_threshold {
        t.edges.iter_mut().for_each(|e| *e = (*e * 2.0).min(t.config.max_edge));
        t.successes = 0;
        t.failures = 0;
    } else if t.failures >= t.config.failure_threshold {
        t.edges.iter_mut().for_each(|e| *e /= 2.0);
        t.successes = 0;
        t.failures = 0;
        if t.edges.iter().any(|e| *e < t.config.min_edge) {
            t = t.restarted();
        }
    }
    t
}

/// Thompson-sampled argmax over the region's candidate grid. Pending queries are ignored.
pub fn turbo_propose(
    tr: &TrustRegion,
    surrogate: &Surrogate,
    domain: &Domain,
    _pending: &PendingSet,
    seed: u64,
) -> Result<Point> {
    let grid = tr.candidates(domain, trust_grid_size(domain.dim()), seed)?;
    let sampler = GridSampler::new(surrogate, &grid, surrogate.fidelities(), crate::mf_model::GRID_CAP)?;
    Ok(thompson_from(&sampler, &grid, seed))
}
