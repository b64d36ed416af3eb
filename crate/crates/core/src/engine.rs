//! The asynchronous optimization loop driven by a discrete-event simulator.
//!
//! Time advances in integer steps. At each step arrivals are collected, the surrogate is
//! refreshed, and the batch is filled with new queries while batch space remains.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use sha2::{Digest, Sha256};

use crate::acquisition::{
    argmax, optimize_acquisition, refine_from_screen, ucb_value, BetaSchedule, BiasBounds, Domain, MfUcb,
    Objective, OptimizerConfig, Optimum, Ucb,
};
use crate::batch::{
    fantasize_pending, lipschitz_over, lipschitz_screen, penalized_acquisition, penalized_value_and_grad, thompson_from,
    trust_grid_size, turbo_update, Ball, LipschitzConfig, PendingQuery, PendingSet, PenalizerParams, Transform,
    TrustRegion, TrustRegionConfig,
};
use crate::benchmarks::BenchmarkPreset;
use crate::error::{ensure, Error, Result};
use crate::fidelity::{information_scores, best_fidelity, update_thresholds, variance_rule, ThresholdState, DEFAULT_GAMMA};
use crate::mes::{mes, sample_max_values_from, MaxValueSamples};
use crate::mf_model::{fit_surrogate, FidelityDataset, GridSampler, ModelVariant, Surrogate, SurrogateConfig, GRID_CAP};
use crate::train::TrainConfig;
use crate::{rng, Fidelity, Point};

/// Evaluation delay of one fidelity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delay {
    Fixed(f64),
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl Delay {
    pub fn expected(&self) -> f64 {
        match *self {
            Delay::Fixed(d) => d,
            Delay::Uniform { low, high } => 0.5 * (low + high),
            Delay::Exponential { mean } => mean,
        }
    }

    pub fn sample<R: Rng>(&self, r: &mut R) -> f64 {
        match *self {
            Delay::Fixed(d) => d,
            Delay::Uniform { low, high } => low + (high - low) * r.random::<f64>(),
            Delay::Exponential { mean } => Exp::new(1.0 / mean).map_or(mean, |e| e.sample(r)),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Delay::Fixed(d) => d >= 0.0 && d.is_finite(),
            Delay::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
            Delay::Exponential { mean } => mean > 0.0 && mean.is_finite(),
        };
        ensure(ok, || format!("invalid delay {self:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelitySpec {
    /// C^(m).
    pub cost: f64,
    /// λ^(m).
    pub space: f64,
    pub delay: Delay,
    /// η^(m), the observation noise standard deviation.
    pub noise: f64,
    /// ζ^(m), used by the independent-GP strategies.
    pub bias: f64,
}

/// The compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Ucb,
    MfGpUcb,
    MfGpUcbLp,
    PlaybookUcb,
    UcbVLp,
    UcbILp,
    TurboTs,
    TurboVTs,
    TurboITs,
    MfMes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityRule {
    /// Always the target fidelity.
    Target,
    Variance,
    Information,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    /// One query by acquisition per step, the rest of the batch uniformly random.
    RandomFill,
    Penalization,
    TrustRegionThompson,
    Fantasies,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Ucb,
        Strategy::MfGpUcb,
        Strategy::MfGpUcbLp,
        Strategy::PlaybookUcb,
        Strategy::UcbVLp,
        Strategy::UcbILp,
        Strategy::TurboTs,
        Strategy::TurboVTs,
        Strategy::TurboITs,
        Strategy::MfMes,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ucb => "UCB",
            Strategy::MfGpUcb => "MF-GP-UCB",
            Strategy::MfGpUcbLp => "MF-GP-UCB+LP",
            Strategy::PlaybookUcb => "PLAyBOOK-UCB",
            Strategy::UcbVLp => "UCB-V-LP",
            Strategy::UcbILp => "UCB-I-LP",
            Strategy::TurboTs => "TuRBO-TS",
            Strategy::TurboVTs => "TuRBO-V-TS",
            Strategy::TurboITs => "TuRBO-I-TS",
            Strategy::MfMes => "MF-MES",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let names: Vec<&str> = Strategy::ALL.iter().map(Strategy::name).collect();
            Error::Argument(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
        })
    }

    pub fn model(&self) -> ModelVariant {
        match self {
            Strategy::Ucb | Strategy::PlaybookUcb | Strategy::TurboTs => ModelVariant::SingleTask,
            Strategy::MfGpUcb | Strategy::MfGpUcbLp => ModelVariant::IndependentGps,
            _ => ModelVariant::MultiTaskLmc,
        }
    }

    pub fn fidelity_rule(&self) -> FidelityRule {
        match self {
            Strategy::Ucb | Strategy::PlaybookUcb | Strategy::TurboTs => FidelityRule::Target,
            Strategy::MfGpUcb | Strategy::MfGpUcbLp | Strategy::UcbVLp | Strategy::TurboVTs => FidelityRule::Variance,
            Strategy::UcbILp | Strategy::TurboITs | Strategy::MfMes => FidelityRule::Information,
        }
    }

    pub fn batching(&self) -> Batching {
        match self {
            Strategy::Ucb | Strategy::MfGpUcb => Batching::RandomFill,
            Strategy::MfGpUcbLp | Strategy::PlaybookUcb | Strategy::UcbVLp | Strategy::UcbILp => Batching::Penalization,
            Strategy::TurboTs | Strategy::TurboVTs | Strategy::TurboITs => Batching::TrustRegionThompson,
            Strategy::MfMes => Batching::Fantasies,
        }
    }

    fn uses_bias_bounds(&self) -> bool {
        matches!(self, Strategy::MfGpUcb | Strategy::MfGpUcbLp)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub strategy: Strategy,
    pub horizon: u64,
    /// Λ.
    pub budget: f64,
    /// Nominal batch size: sizes the initial design and the trust-region failure threshold.
    pub batch_size: usize,
    pub fidelities: Vec<FidelitySpec>,
    pub beta: BetaSchedule,
    pub gamma: f64,
    pub doubling: bool,
    /// Full hyperparameter refit after this many arrivals; conditioning only in between.
    pub refit_every: usize,
    pub train: TrainConfig,
    /// Screening points of the acquisition optimizer; `None` picks the default per model.
    pub screen_size: Option<usize>,
    pub screen_cap: usize,
    pub starts: usize,
    pub acq_learning_rate: f64,
    pub acq_epochs: usize,
    pub fantasies: usize,
    pub max_value_samples: usize,
    pub max_value_grid: usize,
    pub lipschitz: LipschitzConfig,
    pub local_lipschitz: bool,
    pub trust_grid: Option<usize>,
    /// Steps of random initial design; `None` means `⌈5d / batch⌉`.
    pub initial_steps: Option<u64>,
}

impl EngineConfig {
    pub fn for_preset(preset: &BenchmarkPreset, strategy: Strategy) -> Self {
        EngineConfig {
            strategy,
            horizon: preset.horizon,
            budget: preset.budget,
            batch_size: preset.batch_size,
            fidelities: preset.fidelities.clone(),
            beta: BetaSchedule::default(),
            gamma: DEFAULT_GAMMA,
            doubling: true,
            refit_every: 20,
            train: TrainConfig::default(),
            screen_size: None,
            screen_cap: 30_000,
            starts: 10,
            acq_learning_rate: 0.01,
            acq_epochs: 75,
            fantasies: 100,
            max_value_samples: 100,
            max_value_grid: 7500,
            lipschitz: LipschitzConfig::default(),
            local_lipschitz: true,
            trust_grid: None,
            initial_steps: None,
        }
    }

    /// Small inner budgets for quick end-to-end checks of the loop mechanics.
    pub fn smoke(mut self) -> Self {
        self.screen_size = Some(200);
        self.starts = 2;
        self.acq_epochs = 10;
        self.fantasies = 4;
        self.max_value_samples = 4;
        self.max_value_grid = 200;
        self.trust_grid = Some(200);
        self.lipschitz.points_per_dim = 20;
        self.train.epochs = 10;
        self.train.max_points = 100;
        self
    }

    fn screen_size(&self, dim: usize) -> usize {
        let n = self.screen_size.unwrap_or(match (self.strategy.batching(), self.strategy.model()) {
            (Batching::Fantasies, _) => 3750,
            (_, ModelVariant::MultiTaskLmc) => 7500,
            _ => 7500 * dim,
        });
        n.min(self.screen_cap).max(1)
    }

    /// Checks the configuration against the preset; `run` does this first.
    pub fn validate(&self, preset: &BenchmarkPreset) -> Result<()> {
        let mm = preset.num_fidelities();
        ensure(self.fidelities.len() == mm, || format!("{mm} fidelity specs expected"))?;
        ensure(self.budget > 0.0, || "budget must be positive".into())?;
        ensure(self.batch_size >= 1, || "batch size must be at least 1".into())?;
        ensure(self.refit_every >= 1, || "refit interval must be at least 1".into())?;
        ensure(self.gamma > 0.0, || "gamma must be positive".into())?;
        ensure(self.train.learning_rate > 0.0 && self.acq_learning_rate > 0.0, || "learning rates must be positive".into())?;
        ensure(self.screen_cap >= 1, || "screen cap must be at least 1".into())?;
        ensure(self.fantasies >= 1, || "at least one fantasy required".into())?;
        ensure(self.max_value_samples >= 1 && self.max_value_grid >= 1, || "max-value sampling needs samples and a grid".into())?;
        ensure(self.lipschitz.points_per_dim >= 1, || "Lipschitz screening needs at least one point".into())?;
        for (m, f) in self.fidelities.iter().enumerate() {
            ensure(f.space > 0.0 && f.space.is_finite(), || format!("fidelity {}: space must be positive", m + 1))?;
            ensure(f.cost > 0.0, || format!("fidelity {}: cost must be positive", m + 1))?;
            ensure(f.noise >= 0.0, || format!("fidelity {}: noise must be nonnegative", m + 1))?;
            f.delay.validate()?;
        }
        ensure(self.fidelities.iter().any(|f| f.space <= self.budget), || "no fidelity fits in the budget".into())?;
        if self.strategy.fidelity_rule() == FidelityRule::Information {
            ensure(self.fidelities.iter().all(|f| f.delay.expected() > 0.0), || {
                "the information rule needs positive expected delays".into()
            })?;
        }
        if self.strategy.uses_bias_bounds() {
            BiasBounds::new(self.fidelities.iter().map(|f| f.bias).collect())?;
        }
        Ok(())
    }

    /// Short hex digest of the configuration and benchmark name.
    pub fn hash(&self, benchmark: &str) -> String {
        let digest = Sha256::digest(format!("{benchmark}|{self:?}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Submit,
    Arrive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: u64,
    pub kind: EventKind,
    pub id: u64,
    pub fidelity: Fidelity,
    pub x: Point,
    /// Scheduled arrival for submissions; the observed value for arrivals.
    pub arrival: u64,
    pub value: Option<f64>,
}

/// State at the end of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub time: u64,
    pub best_hf: Option<f64>,
    pub regret: Option<f64>,
    /// Occupied batch space, tracked by charging and freeing.
    pub occupied: f64,
    /// Σλ over the pending set, recomputed.
    pub pending_space: f64,
    pub pending: Vec<usize>,
    /// Observations available to the surrogate during this step.
    pub observed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub benchmark: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub budget: f64,
    pub events: Vec<Event>,
    pub rows: Vec<StepRow>,
    /// Recoverable problems met on the way (training fallbacks, region restarts).
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn submissions(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Submit)
    }
}

/// A failed run with everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Box<RunRecord>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run failed after {} steps: {}", self.partial.rows.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

/// `f^(m)(x) + η^(m) ε`, with `ε` drawn from the query id.
pub fn simulate_observation(query: &PendingQuery, preset: &BenchmarkPreset, spec: &FidelitySpec, seed: u64) -> Result<f64> {
    let f = preset.evaluate(&query.x, query.fidelity)?;
    if spec.noise == 0.0 {
        return Ok(f);
    }
    let mut r = rng::keyed_stream(seed, &[rng::purpose::OBSERVATION_NOISE, query.id]);
    let e: f64 = rand_distr::StandardNormal.sample(&mut r);
    Ok(f + spec.noise * e)
}

/// The fidelity to submit at, or `None` when nothing fits. A selected fidelity that does not
/// fit falls back to the higher fidelity with the smallest space that does.
pub fn admit_query(occupied: f64, budget: f64, m: Fidelity, specs: &[FidelitySpec]) -> Option<Fidelity> {
    let fits = |k: Fidelity| occupied + specs[k - 1].space <= budget;
    if fits(m) {
        return Some(m);
    }
    (m + 1..=specs.len()).filter(|&k| fits(k)).min_by(|&a, &b| specs[a - 1].space.total_cmp(&specs[b - 1].space))
}

/// Arrival step of a query submitted at `t` with delay `tau`.
pub fn arrival_time(t: u64, tau: f64) -> u64 {
    ((t as f64 + tau).ceil() as u64).max(t + 1)
}

pub fn run(preset: &BenchmarkPreset, cfg: &EngineConfig, seed: u64) -> std::result::Result<RunRecord, RunFailure> {
    let mut eng = match Engine::new(preset, cfg, seed) {
        Ok(e) => e,
        Err(error) => {
            let partial = Box::new(empty_record(preset, cfg, seed));
            return Err(RunFailure { error, partial });
        }
    };
    for t in 1..=cfg.horizon {
        if let Err(error) = eng.step(t) {
            return Err(RunFailure { error, partial: Box::new(eng.record) });
        }
    }
    Ok(eng.record)
}

fn empty_record(preset: &BenchmarkPreset, cfg: &EngineConfig, seed: u64) -> RunRecord {
    RunRecord {
        benchmark: preset.name.clone(),
        strategy: cfg.strategy,
        seed,
        config_hash: cfg.hash(&preset.name),
        budget: cfg.budget,
        events: Vec::new(),
        rows: Vec::new(),
        notes: Vec::new(),
    }
}

/// Work shared by all proposals of one step.
#[derive(Default)]
struct StepCache {
    screen: Option<(Vec<Point>, Vec<f64>)>,
    fstar: Option<MaxValueSamples>,
    thompson: Option<(Vec<Point>, GridSampler)>,
}

struct Engine<'a> {
    preset: &'a BenchmarkPreset,
    cfg: &'a EngineConfig,
    seed: u64,
    top: Fidelity,
    data: FidelityDataset,
    pending: PendingSet,
    occupied: f64,
    next_id: u64,
    model: Option<Surrogate>,
    arrivals_since_fit: usize,
    fits: u64,
    thresholds: ThresholdState,
    region: Option<TrustRegion>,
    lipschitz: HashMap<u64, f64>,
    best_hf: Option<f64>,
    bias: BiasBounds,
    record: RunRecord,
}

impl<'a> Engine<'a> {
    fn new(preset: &'a BenchmarkPreset, cfg: &'a EngineConfig, seed: u64) -> Result<Self> {
        cfg.validate(preset)?;
        let top = preset.num_fidelities();
        let bias = BiasBounds::new(cfg.fidelities.iter().map(|f| f.bias).collect()).unwrap_or_else(|_| BiasBounds::zero(top));
        Ok(Engine {
            preset,
            cfg,
            seed,
            top,
            data: FidelityDataset::new(top),
            pending: PendingSet::new(),
            occupied: 0.0,
            next_id: 0,
            model: None,
            arrivals_since_fit: 0,
            fits: 0,
            thresholds: ThresholdState::new(top, cfg.gamma.max(f64::MIN_POSITIVE), cfg.doubling)?,
            region: None,
            lipschitz: HashMap::new(),
            best_hf: None,
            bias,
            record: empty_record(preset, cfg, seed),
        })
    }

    fn initial_steps(&self) -> u64 {
        self.cfg.initial_steps.unwrap_or_else(|| (5 * self.preset.dim).div_ceil(self.cfg.batch_size) as u64)
    }

    /// Lowest fidelity the strategy queries.
    fn initial_fidelity(&self) -> Fidelity {
        if self.cfg.strategy.fidelity_rule() == FidelityRule::Target {
            self.top
        } else {
            1
        }
    }

    fn key(&self, purpose: u64, t: u64, k: u64) -> u64 {
        rng::derive_seed(self.seed, &[purpose, t, k])
    }

    fn step(&mut self, t: u64) -> Result<()> {
        let arrived = self.collect_arrivals(t)?;
        self.refresh_model(&arrived)?;
        let mut cache = StepCache::default();
        let mut activity = Vec::new();
        let min_space = self.cfg.fidelities.iter().map(|f| f.space).fold(f64::INFINITY, f64::min);
        let mut k = 0u64;
        while self.occupied + min_space <= self.cfg.budget {
            let (x, m) = self.propose(t, k, &mut cache)?;
            let Some(m) = admit_query(self.occupied, self.cfg.budget, m, &self.cfg.fidelities) else {
                break;
            };
            self.submit(t, x, m)?;
            activity.push(m);
            k += 1;
        }
        if self.cfg.strategy.fidelity_rule() == FidelityRule::Variance {
            let delays: Vec<f64> = self.cfg.fidelities.iter().map(|f| f.delay.expected().max(1e-12)).collect();
            self.thresholds = update_thresholds(&self.thresholds, &delays, &activity);
        }
        self.log_row(t);
        Ok(())
    }

    fn collect_arrivals(&mut self, t: u64) -> Result<Vec<(Point, Fidelity, f64)>> {
        let mut out = Vec::new();
        for q in self.pending.take_arrived(t) {
            let y = simulate_observation(&q, self.preset, &self.cfg.fidelities[q.fidelity - 1], self.seed)?;
            self.occupied -= q.space;
            self.lipschitz.remove(&q.id);
            self.data.push(q.x.clone(), q.fidelity, y);
            if q.fidelity == self.top {
                self.best_hf = Some(self.best_hf.map_or(y, |b| b.max(y)));
            }
            if let Some(r) = &self.region {
                self.region = Some(turbo_update(r, &q.x, y, q.fidelity, self.top));
            }
            self.record.events.push(Event {
                time: t,
                kind: EventKind::Arrive,
                id: q.id,
                fidelity: q.fidelity,
                x: q.x.clone(),
                arrival: q.arrival,
                value: Some(y),
            });
            out.push((q.x, q.fidelity, y));
        }
        if self.pending.is_empty() {
            // no drift from repeated additions and subtractions
            self.occupied = 0.0;
        }
        Ok(out)
    }

    fn has_training_data(&self) -> bool {
        match self.cfg.strategy.model() {
            ModelVariant::SingleTask => self.data.count(self.top) > 0,
            _ => self.data.count(1) > 0,
        }
    }

    fn refresh_model(&mut self, arrived: &[(Point, Fidelity, f64)]) -> Result<()> {
        self.arrivals_since_fit += arrived.len();
        if !self.has_training_data() {
            return Ok(());
        }
        if self.model.is_none() || self.arrivals_since_fit >= self.cfg.refit_every {
            let mut sc = SurrogateConfig::new(self.cfg.strategy.model());
            sc.train = TrainConfig {
                seed: rng::derive_seed(self.seed, &[rng::purpose::TRAIN_SUBSET, self.fits]),
                ..self.cfg.train.clone()
            };
            self.fits += 1;
            match fit_surrogate(&self.data, &sc, self.model.as_ref()) {
                Ok(s) => {
                    self.model = Some(s);
                    self.arrivals_since_fit = 0;
                }
                Err(e @ (Error::Training { .. } | Error::Numerical { .. })) => {
                    let Some(old) = &self.model else { return Err(e) };
                    self.record.notes.push(format!("refit {} failed, kept previous hyperparameters: {e}", self.fits));
                    self.model = Some(old.condition_like(&self.data)?);
                    self.arrivals_since_fit = 0;
                }
                Err(e) => return Err(e),
            }
        } else if !arrived.is_empty() {
            let m = self.model.as_ref().expect("model present");
            self.model = Some(m.with_observations(arrived)?);
        }
        Ok(())
    }

    fn submit(&mut self, t: u64, x: Point, m: Fidelity) -> Result<()> {
        let spec = &self.cfg.fidelities[m - 1];
        let id = self.next_id;
        self.next_id += 1;
        let tau = spec.delay.sample(&mut rng::keyed_stream(self.seed, &[rng::purpose::DELAY, id]));
        let arrival = arrival_time(t, tau);
        self.pending.insert(PendingQuery { id, x: x.clone(), fidelity: m, submitted: t, arrival, space: spec.space })?;
        self.occupied += spec.space;
        self.record.events.push(Event { time: t, kind: EventKind::Submit, id, fidelity: m, x, arrival, value: None });
        Ok(())
    }

    fn log_row(&mut self, t: u64) {
        let pending = (1..=self.top).map(|m| self.pending.count_at(m)).collect();
        self.record.rows.push(StepRow {
            time: t,
            best_hf: self.best_hf,
            regret: self.best_hf.zip(self.preset.optimum).map(|(b, o)| o - b),
            occupied: self.occupied,
            pending_space: self.pending.total_space(),
            pending,
            observed: self.data.total(),
        });
    }

    fn random_point(&self, purpose: u64, t: u64, k: u64) -> Point {
        self.preset.domain.random_point(&mut rng::stream(self.key(purpose, t, k)))
    }

    fn propose(&mut self, t: u64, k: u64, cache: &mut StepCache) -> Result<(Point, Fidelity)> {
        if t <= self.initial_steps() || self.model.is_none() {
            return Ok((self.random_point(rng::purpose::INITIAL_DESIGN, t, k), self.initial_fidelity()));
        }
        let beta = self.cfg.beta.beta(t as usize, self.preset.dim);
        let x = match self.cfg.strategy.batching() {
            Batching::RandomFill if k > 0 => self.random_point(rng::purpose::RANDOM_FILL, t, k),
            Batching::RandomFill | Batching::Penalization => self.maximize_ucb(t, beta, cache)?,
            Batching::TrustRegionThompson => self.trust_region_point(t, k, cache)?,
            Batching::Fantasies => return self.mf_mes_proposal(t, k, cache),
        };
        let m = self.select_fidelity(&x, t, k, beta, cache)?;
        Ok((x, m))
    }

    fn select_fidelity(&mut self, x: &[f64], t: u64, k: u64, beta: f64, cache: &mut StepCache) -> Result<Fidelity> {
        let model = self.model.as_ref().expect("model present");
        match self.cfg.strategy.fidelity_rule() {
            FidelityRule::Target => Ok(self.top),
            FidelityRule::Variance => variance_rule(x, model, beta, &self.thresholds),
            FidelityRule::Information => {
                let fstar = self.max_values(t, cache)?;
                let model = self.model.as_ref().expect("model present");
                let f = fantasize_pending(model, &self.pending.task_inputs(), self.cfg.fantasies, self.key(rng::purpose::FANTASY, t, k))?;
                let delays: Vec<f64> = self.cfg.fidelities.iter().map(|f| f.delay.expected()).collect();
                Ok(best_fidelity(&information_scores(&f, x, &fstar, &delays)?))
            }
        }
    }

    fn max_values(&self, t: u64, cache: &mut StepCache) -> Result<MaxValueSamples> {
        if let Some(f) = &cache.fstar {
            return Ok(f.clone());
        }
        let model = self.model.as_ref().expect("model present");
        let seed = self.key(rng::purpose::MAX_VALUE, t, 0);
        let grid = match &self.preset.domain {
            Domain::UnitBox { dim } => rng::sobol_points(*dim, self.cfg.max_value_grid.min(GRID_CAP), Some(seed)),
            Domain::Grid(g) => subsample(g, self.cfg.max_value_grid.min(GRID_CAP), seed),
        };
        let sampler = GridSampler::new(model, &grid, self.top, GRID_CAP)?;
        let f = sample_max_values_from(&sampler, self.cfg.max_value_samples.max(1), seed);
        cache.fstar = Some(f.clone());
        Ok(f)
    }

    /// Base acquisition values on this step's screen (or the whole grid).
    fn screen<'c>(&self, t: u64, beta: f64, cache: &'c mut StepCache) -> Result<&'c (Vec<Point>, Vec<f64>)> {
        if cache.screen.is_none() {
            let model = self.model.as_ref().expect("model present");
            let pts = match &self.preset.domain {
                Domain::Grid(g) => g.as_ref().clone(),
                Domain::UnitBox { dim } => rng::uniform_points(
                    &mut rng::stream(self.key(rng::purpose::SCREEN, t, 0)),
                    *dim,
                    self.cfg.screen_size(*dim),
                ),
            };
            let values = if self.cfg.strategy.uses_bias_bounds() {
                let mut best = vec![f64::INFINITY; pts.len()];
                for m in 1..=self.top {
                    let (mu, var) = model.predict_many(&pts, m)?;
                    let z = self.bias.values()[m - 1];
                    for i in 0..pts.len() {
                        best[i] = best[i].min(ucb_value(mu[i], var[i], beta) + z);
                    }
                }
                best
            } else {
                let (mu, var) = model.predict_many(&pts, self.top)?;
                mu.iter().zip(&var).map(|(m, v)| ucb_value(*m, *v, beta)).collect()
            };
            cache.screen = Some((pts, values));
        }
        Ok(cache.screen.as_ref().expect("screen filled"))
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            screen_size: self.cfg.screen_size(self.preset.dim),
            starts: self.cfg.starts,
            learning_rate: self.cfg.acq_learning_rate,
            epochs: self.cfg.acq_epochs,
        }
    }

    fn balls(&mut self) -> Result<Vec<Ball>> {
        let model = self.model.as_ref().expect("model present");
        let queries: Vec<PendingQuery> = self.pending.iter().cloned().collect();
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let m = if model.supports(q.fidelity) && self.data.count(q.fidelity) > 0 {
                q.fidelity
            } else {
                match (1..=self.top).rev().find(|&m| model.supports(m) && self.data.count(m) > 0) {
                    Some(m) => m,
                    None => continue,
                }
            };
            let key = if self.cfg.local_lipschitz { q.id } else { u64::MAX - m as u64 };
            let lipschitz = match self.lipschitz.get(&key) {
                Some(l) => *l,
                None => {
                    let seed = rng::derive_seed(self.seed, &[rng::purpose::LIPSCHITZ, key]);
                    let center = self.cfg.local_lipschitz.then_some(q.x.as_slice());
                    let screen = lipschitz_screen(self.preset.dim, center, &self.cfg.lipschitz, seed);
                    let l = lipschitz_over(model, m, &screen)?;
                    self.lipschitz.insert(key, l);
                    l
                }
            };
            let params = PenalizerParams {
                lipschitz,
                max_estimate: self.data.best(m).expect("fidelity has data"),
                local: self.cfg.local_lipschitz,
            };
            let (mu, var) = model.predict(&q.x, m)?;
            out.push(Ball::new(q.x, mu, var.sqrt(), &params));
        }
        Ok(out)
    }

    fn maximize_ucb(&mut self, t: u64, beta: f64, cache: &mut StepCache) -> Result<Point> {
        let penalize = self.cfg.strategy.batching() == Batching::Penalization;
        let balls = if penalize { self.balls()? } else { Vec::new() };
        let transform = if penalize { Transform::Softplus } else { Transform::Identity };
        let (pts, base) = self.screen(t, beta, cache)?;
        let values: Vec<f64> =
            pts.iter().zip(base).map(|(x, b)| penalized_acquisition(*b, x, &balls, transform)).collect();
        if self.preset.domain.is_grid() {
            let i = argmax(&values).ok_or_else(|| Error::NonFinite("acquisition on the grid".into()))?;
            return Ok(pts[i].clone());
        }
        let model = self.model.as_ref().expect("model present");
        let ucb = Ucb { surrogate: model, fidelity: self.top, beta };
        let mfucb = MfUcb { surrogate: model, bias: &self.bias, beta };
        let base_obj: &dyn Objective = if self.cfg.strategy.uses_bias_bounds() { &mfucb } else { &ucb };
        let obj = Penalized { base: base_obj, balls: &balls, transform };
        let best = refine_from_screen(&obj, pts, &values, &self.optimizer_config())?;
        Ok(best.point)
    }

    fn trust_region_point(&mut self, t: u64, k: u64, cache: &mut StepCache) -> Result<Point> {
        if cache.thompson.is_none() {
            let grid = self.trust_region_grid(t)?;
            let model = self.model.as_ref().expect("model present");
            let sampler = GridSampler::new(model, &grid, self.top, GRID_CAP)?;
            cache.thompson = Some((grid, sampler));
        }
        let (grid, sampler) = cache.thompson.as_ref().expect("sampler filled");
        Ok(thompson_from(sampler, grid, self.key(rng::purpose::THOMPSON, t, k)))
    }

    fn trust_region_grid(&mut self, t: u64) -> Result<Vec<Point>> {
        if self.region.is_none() {
            self.region = Some(self.initial_region());
        }
        let size = self.cfg.trust_grid.unwrap_or_else(|| trust_grid_size(self.preset.dim)).min(GRID_CAP);
        let seed = self.key(rng::purpose::TRUST_GRID, t, 0);
        let region = self.region.as_ref().expect("region present");
        match region.candidates(&self.preset.domain, size, seed) {
            Ok(g) => Ok(g),
            Err(Error::TrustRegion) => {
                let restarted = region.restarted();
                self.record.notes.push(format!("step {t}: trust region restarted"));
                let grid = match restarted.candidates(&self.preset.domain, size, seed) {
                    Ok(g) => g,
                    Err(Error::TrustRegion) => match &self.preset.domain {
                        Domain::Grid(g) => subsample(g, size, seed),
                        Domain::UnitBox { dim } => rng::sobol_points(*dim, size, Some(seed)),
                    },
                    Err(e) => return Err(e),
                };
                self.region = Some(restarted);
                Ok(grid)
            }
            Err(e) => Err(e),
        }
    }

    fn initial_region(&self) -> TrustRegion {
        let cfg = TrustRegionConfig::new(self.preset.dim, self.cfg.batch_size);
        let best_at = |m: Fidelity| {
            let ys = &self.data.targets[m - 1];
            argmax(ys).map(|i| (self.data.inputs[m - 1][i].clone(), ys[i]))
        };
        let mut tr = match (1..=self.top).rev().find_map(best_at) {
            Some((x, _)) => TrustRegion::new(x, cfg),
            None => TrustRegion::new(vec![0.5; self.preset.dim], cfg),
        };
        if let Some((x, y)) = best_at(self.top) {
            tr.center = x;
            tr.best = Some(y);
        }
        tr
    }

    fn mf_mes_proposal(&mut self, t: u64, k: u64, cache: &mut StepCache) -> Result<(Point, Fidelity)> {
        let fstar = self.max_values(t, cache)?;
        let model = self.model.as_ref().expect("model present");
        let f = fantasize_pending(model, &self.pending.task_inputs(), self.cfg.fantasies, self.key(rng::purpose::FANTASY, t, k))?;
        let cfg = OptimizerConfig { screen_size: self.cfg.screen_size(self.preset.dim), ..self.optimizer_config() };
        let mut best: Option<(Optimum, Fidelity)> = None;
        for m in 1..=self.top {
            let cost = self.cfg.fidelities[m - 1].cost;
            let obj = |x: &[f64]| Ok(mes(&f, x, m, &fstar)? / cost);
            let o = optimize_acquisition(&obj, &self.preset.domain, &cfg, self.key(rng::purpose::SCREEN, t, k))?;
            // ties go to the higher fidelity
            if best.as_ref().is_none_or(|b| o.value >= b.0.value) {
                best = Some((o, m));
            }
        }
        let (o, m) = best.expect("at least one fidelity");
        Ok((o.point, m))
    }
}

fn subsample(grid: &[Point], n: usize, seed: u64) -> Vec<Point> {
    if grid.len() <= n {
        return grid.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut rng::stream(seed), grid.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| grid[i].clone()).collect()
}

/// A base acquisition times the penalizers of the pending queries.
struct Penalized<'a> {
    base: &'a dyn Objective,
    balls: &'a [Ball],
    transform: Transform,
}

impl Objective for Penalized<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(penalized_acquisition(self.base.value(x)?, x, self.balls, self.transform))
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.base.value_and_grad(x)?;
        Ok(penalized_value_and_grad(v, &g, x, self.balls, self.transform))
    }
}
