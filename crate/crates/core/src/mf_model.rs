//! Multi-fidelity surrogates: independent per-fidelity GPs and the LMC multi-task GP.

use faer::Mat;

use crate::error::{ensure, Error, Result};
use crate::gp::{self, GpHyperparams, KernelParams, PosteriorGp, PriorBoxes, Trainable};
use crate::linalg::Cholesky;
use crate::posterior::{self, Covariance, ExactPosterior, Prediction};
use crate::rng;
use crate::train::{self, Interval, TrainConfig};
use crate::{Fidelity, Point};

/// An input of the multi-task GP: a point and its fidelity (`1..=M`).
pub type TaskInput = (Point, Fidelity);

/// Observations per fidelity, `inputs[m-1]`, `targets[m-1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FidelityDataset {
    pub inputs: Vec<Vec<Point>>,
    pub targets: Vec<Vec<f64>>,
}

impl FidelityDataset {
    pub fn new(fidelities: usize) -> Self {
        FidelityDataset { inputs: vec![Vec::new(); fidelities], targets: vec![Vec::new(); fidelities] }
    }

    pub fn fidelities(&self) -> usize {
        self.inputs.len()
    }

    pub fn push(&mut self, x: Point, m: Fidelity, y: f64) {
        self.inputs[m - 1].push(x);
        self.targets[m - 1].push(y);
    }

    pub fn count(&self, m: Fidelity) -> usize {
        self.inputs[m - 1].len()
    }

    pub fn total(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }

    /// All observations stacked in fidelity order.
    pub fn stacked(&self) -> (Vec<TaskInput>, Vec<f64>) {
        let mut xs = Vec::with_capacity(self.total());
        let mut ys = Vec::with_capacity(self.total());
        for (m, (ins, ts)) in self.inputs.iter().zip(&self.targets).enumerate() {
            for (x, y) in ins.iter().zip(ts) {
                xs.push((x.clone(), m + 1));
                ys.push(*y);
            }
        }
        (xs, ys)
    }

    pub fn best(&self, m: Fidelity) -> Option<f64> {
        self.targets[m - 1].iter().copied().fold(None, |a, y| Some(a.map_or(y, |a: f64| a.max(y))))
    }
}

/// One separable term `k_w(x, x') · B_w` of the LMC kernel, with `B_w = A_w A_wᵀ + diag(v_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams {
    pub kernel: KernelParams,
    /// `M × r` factor.
    pub a: Vec<Vec<f64>>,
    /// Nonnegative diagonal lift, length `M`.
    pub v: Vec<f64>,
}

impl LatentParams {
    pub fn coregionalization(&self) -> Vec<Vec<f64>> {
        let m = self.v.len();
        (0..m)
            .map(|p| {
                (0..m)
                    .map(|q| {
                        let dot: f64 = self.a[p].iter().zip(&self.a[q]).map(|(x, y)| x * y).sum();
                        dot + if p == q { self.v[p] } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmcParams {
    pub latents: Vec<LatentParams>,
    /// Per-fidelity observation noise variance.
    pub noise: Vec<f64>,
    /// Per-fidelity constant prior mean.
    pub means: Vec<f64>,
}

impl LmcParams {
    pub fn new(latents: Vec<LatentParams>, noise: Vec<f64>, means: Vec<f64>) -> Result<Self> {
        ensure(!latents.is_empty(), || "at least one latent kernel required".into())?;
        let m = noise.len();
        ensure(m >= 1 && means.len() == m, || "noise and means need one entry per fidelity".into())?;
        let d = latents[0].kernel.dim();
        let r = latents[0].a.first().map_or(0, Vec::len);
        for l in &latents {
            ensure(l.kernel.dim() == d, || "latent kernels must share the input dimension".into())?;
            ensure(l.a.len() == m && l.a.iter().all(|row| row.len() == r), || {
                format!("each A_w must be {m}x{r}")
            })?;
            ensure(r <= m, || "rank must not exceed the number of fidelities".into())?;
            ensure(l.v.len() == m && l.v.iter().all(|v| *v >= 0.0), || "v_w must be nonnegative, length M".into())?;
        }
        ensure(noise.iter().all(|n| *n >= 0.0), || "noise must be nonnegative".into())?;
        Ok(LmcParams { latents, noise, means })
    }

    /// Deterministic, symmetry-breaking starting point: `latents` terms of rank `rank`,
    /// with lengthscales spread over the prior box.
    pub fn initial(fidelities: usize, dim: usize, latents: usize, rank: usize) -> Self {
        let latents = (0..latents)
            .map(|w| {
                let frac = if latents > 1 { w as f64 / (latents - 1) as f64 } else { 0.0 };
                let a = (0..fidelities)
                    .map(|p| (0..rank).map(|c| 0.4 * (1.0 + w as f64 + 2.0 * p as f64 + 3.0 * c as f64).cos()).collect())
                    .collect();
                LatentParams {
                    kernel: KernelParams::isotropic(dim, 0.15 + 0.3 * frac, 1.0),
                    a,
                    v: vec![0.05; fidelities],
                }
            })
            .collect();
        LmcParams { latents, noise: vec![1e-3; fidelities], means: vec![0.0; fidelities] }
    }

    pub fn fidelities(&self) -> usize {
        self.noise.len()
    }

    pub fn dim(&self) -> usize {
        self.latents[0].kernel.dim()
    }

    pub fn rank(&self) -> usize {
        self.latents[0].a.first().map_or(0, Vec::len)
    }
}

fn check_fidelity(m: Fidelity, fidelities: usize) -> Result<()> {
    ensure((1..=fidelities).contains(&m), || format!("fidelity {m} outside 1..={fidelities}"))
}

/// `Σ_w k_w(x1, x2) · (B_w)_{m1, m2}`.
pub fn lmc_kernel(x1: &[f64], m1: Fidelity, x2: &[f64], m2: Fidelity, params: &LmcParams) -> Result<f64> {
    check_fidelity(m1, params.fidelities())?;
    check_fidelity(m2, params.fidelities())?;
    let mut s = 0.0;
    for l in &params.latents {
        let b = l.coregionalization();
        s += gp::rbf_kernel(x1, x2, &l.kernel)? * b[m1 - 1][m2 - 1];
    }
    Ok(s)
}

/// The LMC covariance over `(point, fidelity)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Lmc {
    params: LmcParams,
    b: Vec<Vec<Vec<f64>>>,
}

impl Lmc {
    pub fn new(params: LmcParams) -> Self {
        let b = params.latents.iter().map(LatentParams::coregionalization).collect();
        Lmc { params, b }
    }

    pub fn params(&self) -> &LmcParams {
        &self.params
    }
}

impl Covariance for Lmc {
    type Input = TaskInput;

    fn cov(&self, a: &TaskInput, b: &TaskInput) -> f64 {
        let (p, q) = (a.1 - 1, b.1 - 1);
        self.params.latents.iter().zip(&self.b).map(|(l, bw)| l.kernel.eval(&a.0, &b.0) * bw[p][q]).sum()
    }

    fn cov_grad(&self, a: &TaskInput, b: &TaskInput, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (p, q) = (a.1 - 1, b.1 - 1);
        for (l, bw) in self.params.latents.iter().zip(&self.b) {
            l.kernel.add_grad(&a.0, &b.0, bw[p][q], out);
        }
    }

    fn prior_mean(&self, a: &TaskInput) -> f64 {
        self.params.means[a.1 - 1]
    }

    fn noise(&self, a: &TaskInput) -> f64 {
        self.params.noise[a.1 - 1]
    }

    fn scale(&self) -> f64 {
        (0..self.params.fidelities())
            .map(|m| self.params.latents.iter().zip(&self.b).map(|(l, b)| l.kernel.output_scale * b[m][m]).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn input_dim(&self) -> usize {
        self.params.dim()
    }
}

/// Log marginal likelihood of stacked multi-task data under the LMC prior.
pub fn lmc_log_marginal_likelihood(inputs: &[TaskInput], targets: &[f64], params: &LmcParams) -> Result<f64> {
    posterior::log_marginal_likelihood(&Lmc::new(params.clone()), inputs, targets)
}

/// Log marginal likelihood and its gradient in the flat layout of [`lmc_encode`]:
/// per latent `[log ℓ (d), A (M·r, row-major), log v (M)]`, then `log η² (M)`, then `μ (M)`.
/// Latent output scales are held fixed (the coregionalization matrices carry the scale).
pub fn lmc_log_marginal_likelihood_grad(
    inputs: &[TaskInput],
    targets: &[f64],
    params: &LmcParams,
) -> Result<(f64, Vec<f64>)> {
    let cov = Lmc::new(params.clone());
    let terms = posterior::likelihood_terms(&cov, inputs, targets, true)?;
    let q = terms.q.expect("requested");
    let n = inputs.len();
    let mm = params.fidelities();
    let d = params.dim();
    let r = params.rank();
    let mut grad = Vec::with_capacity(lmc_param_count(params));
    for (l, b) in params.latents.iter().zip(&cov.b) {
        let inv_l2: Vec<f64> = l.kernel.lengthscales.iter().map(|v| 1.0 / (v * v)).collect();
        let mut g_ls = vec![0.0; d];
        // G[p][q] = Σ_{i∈p, j∈q} Q_ij k_w(x_i, x_j)
        let mut g = vec![vec![0.0; mm]; mm];
        for j in 0..n {
            for i in 0..n {
                let (p, s) = (inputs[i].1 - 1, inputs[j].1 - 1);
                let k = l.kernel.eval(&inputs[i].0, &inputs[j].0);
                let qk = q[(i, j)] * k;
                g[p][s] += qk;
                let w = 0.5 * qk * b[p][s];
                for a in 0..d {
                    let z = inputs[i].0[a] - inputs[j].0[a];
                    g_ls[a] += w * z * z * inv_l2[a];
                }
            }
        }
        grad.extend_from_slice(&g_ls);
        for p in 0..mm {
            for c in 0..r {
                grad.push((0..mm).map(|s| g[p][s] * l.a[s][c]).sum());
            }
        }
        for p in 0..mm {
            grad.push(0.5 * g[p][p] * l.v[p]);
        }
    }
    let mut g_noise = vec![0.0; mm];
    let mut g_mean = vec![0.0; mm];
    for i in 0..n {
        let p = inputs[i].1 - 1;
        g_noise[p] += 0.5 * q[(i, i)] * params.noise[p];
        g_mean[p] += terms.alpha[i];
    }
    grad.extend(g_noise);
    grad.extend(g_mean);
    Ok((terms.value, grad))
}

pub fn lmc_param_count(params: &LmcParams) -> usize {
    let (mm, d, r) = (params.fidelities(), params.dim(), params.rank());
    params.latents.len() * (d + mm * r + mm) + 2 * mm
}

/// Flattens the trainable LMC parameters (see [`lmc_log_marginal_likelihood_grad`]).
pub fn lmc_encode(params: &LmcParams) -> Vec<f64> {
    let mut t = Vec::with_capacity(lmc_param_count(params));
    for l in &params.latents {
        t.extend(l.kernel.lengthscales.iter().map(|v| v.ln()));
        for row in &l.a {
            t.extend_from_slice(row);
        }
        t.extend(l.v.iter().map(|v| v.max(1e-300).ln()));
    }
    t.extend(params.noise.iter().map(|v| v.max(1e-300).ln()));
    t.extend_from_slice(&params.means);
    t
}

pub fn lmc_decode(theta: &[f64], base: &LmcParams) -> LmcParams {
    let mut p = base.clone();
    let mut it = theta.iter().copied();
    for l in p.latents.iter_mut() {
        for v in l.kernel.lengthscales.iter_mut() {
            *v = it.next().unwrap().exp();
        }
        for row in l.a.iter_mut() {
            for v in row.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in l.v.iter_mut() {
            *v = it.next().unwrap().exp();
        }
    }
    for v in p.noise.iter_mut() {
        *v = it.next().unwrap().exp();
    }
    for v in p.means.iter_mut() {
        *v = it.next().unwrap();
    }
    p
}

/// Boxes of the LMC-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmcBoxes {
    /// Entries of each `A_w`.
    pub factor: Interval,
    /// Diagonal lifts `v_w`.
    pub lift: Interval,
}

impl Default for LmcBoxes {
    fn default() -> Self {
        LmcBoxes { factor: Interval { lower: -1.5, upper: 1.5 }, lift: Interval { lower: 1e-6, upper: 2.0 } }
    }
}

fn lmc_boxes(params: &LmcParams, boxes: &PriorBoxes, lmc: &LmcBoxes) -> Vec<Interval> {
    let log = |b: gp::HyperPriorBox| Interval { lower: b.lower.ln(), upper: b.upper.ln() };
    let (mm, d, r) = (params.fidelities(), params.dim(), params.rank());
    let mut iv = Vec::new();
    for _ in &params.latents {
        iv.extend(std::iter::repeat_n(log(boxes.lengthscale), d));
        iv.extend(std::iter::repeat_n(lmc.factor, mm * r));
        iv.extend(std::iter::repeat_n(Interval { lower: lmc.lift.lower.ln(), upper: lmc.lift.upper.ln() }, mm));
    }
    iv.extend(std::iter::repeat_n(log(boxes.noise), mm));
    iv.extend(std::iter::repeat_n(Interval { lower: boxes.mean.lower, upper: boxes.mean.upper }, mm));
    iv
}

/// Trains all LMC parameters jointly on the stacked data.
pub fn fit_lmc(
    inputs: &[TaskInput],
    targets: &[f64],
    init: &LmcParams,
    boxes: &PriorBoxes,
    lmc: &LmcBoxes,
    cfg: &TrainConfig,
) -> Result<LmcParams> {
    if inputs.is_empty() {
        return Err(Error::Training { epochs: 0, reason: "no training data".into() });
    }
    let idx = train::subset_indices(inputs.len(), cfg.max_points, cfg.seed);
    let (xs, ys): (Vec<TaskInput>, Vec<f64>) = idx.iter().map(|&i| (inputs[i].clone(), targets[i])).unzip();
    let trained = train::maximize(&lmc_encode(init), &lmc_boxes(init, boxes, lmc), cfg, |theta| {
        lmc_log_marginal_likelihood_grad(&xs, &ys, &lmc_decode(theta, init))
    })?;
    Ok(lmc_decode(&trained.params, init))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// One GP on target-fidelity data only.
    SingleTask,
    IndependentGps,
    MultiTaskLmc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub variant: ModelVariant,
    pub train: TrainConfig,
    pub boxes: PriorBoxes,
    pub lmc_boxes: LmcBoxes,
    /// Number of LMC latent terms; `None` means `2M`.
    pub latents: Option<usize>,
    /// Rank of each `A_w`; `None` means `M`.
    pub rank: Option<usize>,
}

impl SurrogateConfig {
    pub fn new(variant: ModelVariant) -> Self {
        SurrogateConfig {
            variant,
            train: TrainConfig::default(),
            boxes: PriorBoxes::default(),
            lmc_boxes: LmcBoxes::default(),
            latents: None,
            rank: None,
        }
    }
}

/// A fitted multi-fidelity surrogate. Values are immutable; conditioning returns a new one.
#[derive(Debug, Clone)]
pub enum Surrogate {
    SingleTask { gp: PosteriorGp, fidelities: usize },
    Independent(Vec<PosteriorGp>),
    Lmc(ExactPosterior<Lmc>),
}

/// Fits hyperparameters and conditions on all of `data`.
///
/// `warm` supplies starting hyperparameters from a previous fit of the same variant.
pub fn fit_surrogate(data: &FidelityDataset, cfg: &SurrogateConfig, warm: Option<&Surrogate>) -> Result<Surrogate> {
    let mm = data.fidelities();
    ensure(mm >= 1, || "dataset has no fidelities".into())?;
    let dim = data.inputs.iter().flatten().next().map(Vec::len);
    match cfg.variant {
        ModelVariant::SingleTask => {
            let (xs, ys) = (&data.inputs[mm - 1], &data.targets[mm - 1]);
            let d = dim.ok_or_else(|| Error::Training { epochs: 0, reason: "no target-fidelity data".into() })?;
            if xs.is_empty() {
                return Err(Error::Training { epochs: 0, reason: "no target-fidelity data".into() });
            }
            let init = match warm {
                Some(Surrogate::SingleTask { gp, .. }) => gp.hyperparams().clone(),
                _ => GpHyperparams::initial(d),
            };
            let h = gp::fit_hyperparameters(xs, ys, &init, &cfg.boxes, &cfg.train)?;
            Ok(Surrogate::SingleTask { gp: gp::condition(xs.clone(), ys.clone(), h)?, fidelities: mm })
        }
        ModelVariant::IndependentGps => {
            if data.count(1) == 0 {
                return Err(Error::Training { epochs: 0, reason: "no lowest-fidelity data".into() });
            }
            let d = dim.unwrap();
            let warm_h: Option<Vec<GpHyperparams>> = match warm {
                Some(Surrogate::Independent(gps)) if gps.len() == mm => {
                    Some(gps.iter().map(|g| g.hyperparams().clone()).collect())
                }
                _ => None,
            };
            let init1 = warm_h.as_ref().map_or_else(|| GpHyperparams::initial(d), |w| w[0].clone());
            let h1 = gp::fit_hyperparameters(&data.inputs[0], &data.targets[0], &init1, &cfg.boxes, &cfg.train)?;
            let mut gps = vec![gp::condition(data.inputs[0].clone(), data.targets[0].clone(), h1.clone())?];
            for m in 2..=mm {
                let mut init = warm_h.as_ref().map_or_else(|| h1.clone(), |w| w[m - 1].clone());
                init.kernel.lengthscales = h1.kernel.lengthscales.clone();
                init.mean_constant = h1.mean_constant;
                let (xs, ys) = (&data.inputs[m - 1], &data.targets[m - 1]);
                let h = if xs.is_empty() {
                    init
                } else {
                    let c = TrainConfig { seed: rng::derive_seed(cfg.train.seed, &[m as u64]), ..cfg.train.clone() };
                    gp::fit_hyperparameters_masked(xs, ys, &init, &cfg.boxes, &c, Trainable::SCALE_AND_NOISE)?
                };
                gps.push(gp::condition(xs.clone(), ys.clone(), h)?);
            }
            Ok(Surrogate::Independent(gps))
        }
        ModelVariant::MultiTaskLmc => {
            if data.count(1) == 0 {
                return Err(Error::Training { epochs: 0, reason: "no lowest-fidelity data".into() });
            }
            let d = dim.unwrap();
            let init = match warm {
                Some(Surrogate::Lmc(p)) if p.covariance().params().fidelities() == mm => p.covariance().params().clone(),
                _ => LmcParams::initial(mm, d, cfg.latents.unwrap_or(2 * mm), cfg.rank.unwrap_or(mm)),
            };
            let (xs, ys) = data.stacked();
            let params = fit_lmc(&xs, &ys, &init, &cfg.boxes, &cfg.lmc_boxes, &cfg.train)?;
            Ok(Surrogate::Lmc(ExactPosterior::new(Lmc::new(params), xs, ys)?))
        }
    }
}

impl Surrogate {
    /// Conditions a surrogate with given hyperparameters on `data`, without training.
    pub fn condition_like(&self, data: &FidelityDataset) -> Result<Surrogate> {
        let mm = data.fidelities();
        match self {
            Surrogate::SingleTask { gp, .. } => Ok(Surrogate::SingleTask {
                gp: gp::condition(data.inputs[mm - 1].clone(), data.targets[mm - 1].clone(), gp.hyperparams().clone())?,
                fidelities: mm,
            }),
            Surrogate::Independent(gps) => Ok(Surrogate::Independent(
                gps.iter()
                    .enumerate()
                    .map(|(m, g)| gp::condition(data.inputs[m].clone(), data.targets[m].clone(), g.hyperparams().clone()))
                    .collect::<Result<_>>()?,
            )),
            Surrogate::Lmc(p) => {
                let (xs, ys) = data.stacked();
                Ok(Surrogate::Lmc(ExactPosterior::new(p.covariance().clone(), xs, ys)?))
            }
        }
    }

    pub fn variant(&self) -> ModelVariant {
        match self {
            Surrogate::SingleTask { .. } => ModelVariant::SingleTask,
            Surrogate::Independent(_) => ModelVariant::IndependentGps,
            Surrogate::Lmc(_) => ModelVariant::MultiTaskLmc,
        }
    }

    pub fn fidelities(&self) -> usize {
        match self {
            Surrogate::SingleTask { fidelities, .. } => *fidelities,
            Surrogate::Independent(g) => g.len(),
            Surrogate::Lmc(p) => p.covariance().params().fidelities(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Surrogate::SingleTask { gp, .. } => gp.hyperparams().kernel.dim(),
            Surrogate::Independent(g) => g[0].hyperparams().kernel.dim(),
            Surrogate::Lmc(p) => p.covariance().params().dim(),
        }
    }

    /// Whether posterior queries at fidelity `m` are available.
    pub fn supports(&self, m: Fidelity) -> bool {
        match self {
            Surrogate::SingleTask { fidelities, .. } => m == *fidelities,
            _ => (1..=self.fidelities()).contains(&m),
        }
    }

    fn check(&self, x: &[f64], m: Fidelity) -> Result<()> {
        ensure(self.supports(m), || format!("fidelity {m} not modelled by this surrogate"))?;
        ensure(x.len() == self.dim(), || format!("point of dimension {} where {} expected", x.len(), self.dim()))
    }

    /// Observation noise variance at fidelity `m`.
    pub fn noise(&self, m: Fidelity) -> f64 {
        match self {
            Surrogate::SingleTask { gp, .. } => gp.hyperparams().noise_variance,
            Surrogate::Independent(g) => g[m - 1].hyperparams().noise_variance,
            Surrogate::Lmc(p) => p.covariance().params().noise[m - 1],
        }
    }

    /// Number of observations conditioned on.
    pub fn len(&self) -> usize {
        match self {
            Surrogate::SingleTask { gp, .. } => gp.len(),
            Surrogate::Independent(g) => g.iter().map(|g| g.len()).sum(),
            Surrogate::Lmc(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Posterior mean and latent variance of `f^(m)(x)`.
    pub fn predict(&self, x: &[f64], m: Fidelity) -> Result<(f64, f64)> {
        self.check(x, m)?;
        Ok(match self {
            Surrogate::SingleTask { gp, .. } => gp.predict(&x.to_vec()),
            Surrogate::Independent(g) => g[m - 1].predict(&x.to_vec()),
            Surrogate::Lmc(p) => p.predict(&(x.to_vec(), m)),
        })
    }

    /// Posterior mean under each target set (fantasy), and the shared variance.
    pub fn predict_sets(&self, x: &[f64], m: Fidelity) -> Result<(Vec<f64>, f64)> {
        self.check(x, m)?;
        Ok(match self {
            Surrogate::SingleTask { gp, .. } => gp.predict_all_sets(&x.to_vec()),
            Surrogate::Independent(g) => g[m - 1].predict_all_sets(&x.to_vec()),
            Surrogate::Lmc(p) => p.predict_all_sets(&(x.to_vec(), m)),
        })
    }

    pub fn predict_with_grad(&self, x: &[f64], m: Fidelity) -> Result<Prediction> {
        self.check(x, m)?;
        Ok(match self {
            Surrogate::SingleTask { gp, .. } => gp.predict_with_grad(&x.to_vec()),
            Surrogate::Independent(g) => g[m - 1].predict_with_grad(&x.to_vec()),
            Surrogate::Lmc(p) => p.predict_with_grad(&(x.to_vec(), m)),
        })
    }

    pub fn mean_gradient(&self, x: &[f64], m: Fidelity) -> Result<Vec<f64>> {
        self.check(x, m)?;
        Ok(match self {
            Surrogate::SingleTask { gp, .. } => gp.mean_gradient(&x.to_vec()),
            Surrogate::Independent(g) => g[m - 1].mean_gradient(&x.to_vec()),
            Surrogate::Lmc(p) => p.mean_gradient(&(x.to_vec(), m)),
        })
    }

    pub fn predict_many(&self, xs: &[Point], m: Fidelity) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(x) = xs.first() {
            self.check(x, m)?;
        }
        Ok(match self {
            Surrogate::SingleTask { gp, .. } => gp.predict_many(xs),
            Surrogate::Independent(g) => g[m - 1].predict_many(xs),
            Surrogate::Lmc(p) => {
                let inputs: Vec<TaskInput> = xs.iter().map(|x| (x.clone(), m)).collect();
                p.predict_many(&inputs)
            }
        })
    }

    pub fn num_target_sets(&self) -> usize {
        match self {
            Surrogate::SingleTask { gp, .. } => gp.num_target_sets(),
            Surrogate::Independent(g) => g[0].num_target_sets(),
            Surrogate::Lmc(p) => p.num_target_sets(),
        }
    }

    /// Joint posterior of the latent values at `points`: a `len × sets` mean matrix and the
    /// covariance. Fidelities the surrogate does not model are rejected.
    pub fn joint_sets(&self, points: &[TaskInput]) -> Result<(Mat<f64>, Mat<f64>)> {
        for (x, m) in points {
            self.check(x, *m)?;
        }
        match self {
            Surrogate::SingleTask { gp, .. } => {
                let xs: Vec<Point> = points.iter().map(|p| p.0.clone()).collect();
                Ok(gp.joint_all_sets(&xs))
            }
            Surrogate::Lmc(p) => Ok(p.joint_all_sets(points)),
            Surrogate::Independent(gps) => {
                let g = points.len();
                let sets = self.num_target_sets();
                let mut mean = Mat::zeros(g, sets);
                let mut cov = Mat::zeros(g, g);
                for (m, gp) in gps.iter().enumerate() {
                    let idx: Vec<usize> = (0..g).filter(|&i| points[i].1 == m + 1).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let xs: Vec<Point> = idx.iter().map(|&i| points[i].0.clone()).collect();
                    let (mu, c) = gp.joint_all_sets(&xs);
                    for (a, &i) in idx.iter().enumerate() {
                        for s in 0..sets {
                            mean[(i, s)] = mu[(a, s)];
                        }
                        for (b, &j) in idx.iter().enumerate() {
                            cov[(i, j)] = c[(a, b)];
                        }
                    }
                }
                Ok((mean, cov))
            }
        }
    }

    /// Joint posterior (first target set) of the latent values at `points`.
    pub fn joint(&self, points: &[TaskInput]) -> Result<(Vec<f64>, Mat<f64>)> {
        let (m, c) = self.joint_sets(points)?;
        Ok((m.col(0).iter().copied().collect(), c))
    }

    /// Conditions on additional observations with unchanged hyperparameters.
    ///
    /// A single-task surrogate ignores observations below the target fidelity.
    pub fn with_observations(&self, obs: &[(Point, Fidelity, f64)]) -> Result<Surrogate> {
        ensure(self.num_target_sets() == 1, || "cannot add observations to a fantasized surrogate".into())?;
        for (x, m, _) in obs {
            check_fidelity(*m, self.fidelities())?;
            ensure(x.len() == self.dim(), || "observation dimension mismatch".into())?;
        }
        let col = |ys: &[f64]| Mat::from_fn(ys.len(), 1, |i, _| ys[i]);
        Ok(match self {
            Surrogate::SingleTask { gp, fidelities } => {
                let (xs, ys): (Vec<Point>, Vec<f64>) =
                    obs.iter().filter(|o| o.1 == *fidelities).map(|o| (o.0.clone(), o.2)).unzip();
                Surrogate::SingleTask { gp: gp.extended(&xs, &col(&ys))?, fidelities: *fidelities }
            }
            Surrogate::Independent(gps) => Surrogate::Independent(
                gps.iter()
                    .enumerate()
                    .map(|(m, g)| {
                        let (xs, ys): (Vec<Point>, Vec<f64>) =
                            obs.iter().filter(|o| o.1 == m + 1).map(|o| (o.0.clone(), o.2)).unzip();
                        if xs.is_empty() {
                            Ok(g.clone())
                        } else {
                            g.extended(&xs, &col(&ys))
                        }
                    })
                    .collect::<Result<_>>()?,
            ),
            Surrogate::Lmc(p) => {
                let xs: Vec<TaskInput> = obs.iter().map(|o| (o.0.clone(), o.1)).collect();
                let ys: Vec<f64> = obs.iter().map(|o| o.2).collect();
                Surrogate::Lmc(p.extended(&xs, &col(&ys))?)
            }
        })
    }

    /// Conditions on fantasized observations at `pending`: column `s` of `values`
    /// (`pending.len() × S`) is the `s`-th fantasy dataset. All fantasies share one factor.
    pub fn fantasize(&self, pending: &[TaskInput], values: &Mat<f64>) -> Result<Surrogate> {
        ensure(values.nrows() == pending.len(), || "one fantasy row per pending point expected".into())?;
        let pick = |keep: &dyn Fn(Fidelity) -> bool| {
            let idx: Vec<usize> = (0..pending.len()).filter(|&i| keep(pending[i].1)).collect();
            let xs: Vec<Point> = idx.iter().map(|&i| pending[i].0.clone()).collect();
            let vals = Mat::from_fn(idx.len(), values.ncols(), |a, s| values[(idx[a], s)]);
            (xs, vals)
        };
        Ok(match self {
            Surrogate::SingleTask { gp, fidelities } => {
                let top = *fidelities;
                let (xs, vals) = pick(&|m| m == top);
                Surrogate::SingleTask { gp: gp.fantasize(&xs, &vals)?, fidelities: top }
            }
            Surrogate::Independent(gps) => Surrogate::Independent(
                gps.iter()
                    .enumerate()
                    .map(|(m, g)| {
                        let (xs, vals) = pick(&|f| f == m + 1);
                        g.fantasize(&xs, &vals)
                    })
                    .collect::<Result<_>>()?,
            ),
            Surrogate::Lmc(p) => Surrogate::Lmc(p.fantasize(pending, values)?),
        })
    }

    pub fn lmc_params(&self) -> Option<&LmcParams> {
        match self {
            Surrogate::Lmc(p) => Some(p.covariance().params()),
            _ => None,
        }
    }

    pub fn gp_hyperparams(&self, m: Fidelity) -> Option<&GpHyperparams> {
        match self {
            Surrogate::SingleTask { gp, fidelities } if m == *fidelities => Some(gp.hyperparams()),
            Surrogate::Independent(g) => g.get(m - 1).map(|g| g.hyperparams()),
            _ => None,
        }
    }
}

/// Default cap on the number of grid points for joint posterior sampling.
pub const GRID_CAP: usize = 7500;

/// Joint posterior at a fixed grid, factorized once so that each sample costs one
/// triangular matrix-vector product.
#[derive(Debug, Clone)]
pub struct GridSampler {
    mean: Vec<f64>,
    chol: Cholesky,
}

impl GridSampler {
    pub fn new(surrogate: &Surrogate, grid: &[Point], m: Fidelity, cap: usize) -> Result<Self> {
        ensure(!grid.is_empty(), || "sampling grid is empty".into())?;
        ensure(grid.len() <= cap, || format!("grid of {} points exceeds the cap {cap}", grid.len()))?;
        let pts: Vec<TaskInput> = grid.iter().map(|x| (x.clone(), m)).collect();
        let (mean, cov) = surrogate.joint(&pts)?;
        let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0, f64::max);
        let chol = Cholesky::factor(&cov, scale.max(1e-12))?;
        Ok(GridSampler { mean, chol })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// One joint sample `μ + L z`.
    pub fn sample<R: rand::Rng>(&self, r: &mut R) -> Vec<f64> {
        let z = rng::standard_normals(r, self.len());
        let l = self.chol.l();
        let mut out = self.mean.clone();
        for j in 0..self.len() {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let col = l.col(j);
            for i in j..self.len() {
                out[i] += col[i] * zj;
            }
        }
        out
    }

    pub fn sample_seeded(&self, seed: u64) -> Vec<f64> {
        self.sample(&mut rng::stream(seed))
    }
}

/// One exact joint posterior sample of `f^(m)` at the grid points.
pub fn sample_on_grid(surrogate: &Surrogate, grid: &[Point], m: Fidelity, seed: u64) -> Result<Vec<f64>> {
    Ok(GridSampler::new(surrogate, grid, m, GRID_CAP)?.sample_seeded(seed))
}

/// The independent-GP bank with given hyperparameters, conditioned on `data`.
pub fn independent_from(data: &FidelityDataset, hypers: &[GpHyperparams]) -> Result<Surrogate> {
    ensure(hypers.len() == data.fidelities(), || "one hyperparameter set per fidelity expected".into())?;
    Ok(Surrogate::Independent(
        hypers
            .iter()
            .enumerate()
            .map(|(m, h)| gp::condition(data.inputs[m].clone(), data.targets[m].clone(), h.clone()))
            .collect::<Result<_>>()?,
    ))
}

/// The LMC posterior with given parameters, conditioned on `data`.
pub fn lmc_from(data: &FidelityDataset, params: LmcParams) -> Result<Surrogate> {
    ensure(params.fidelities() == data.fidelities(), || "fidelity count mismatch".into())?;
    let (xs, ys) = data.stacked();
    Ok(Surrogate::Lmc(ExactPosterior::new(Lmc::new(params), xs, ys)?))
}

/// The single-task posterior with given hyperparameters on the target fidelity of `data`.
pub fn single_from(data: &FidelityDataset, hyper: GpHyperparams) -> Result<Surrogate> {
    let mm = data.fidelities();
    Ok(Surrogate::SingleTask {
        gp: gp::condition(data.inputs[mm - 1].clone(), data.targets[mm - 1].clone(), hyper)?,
        fidelities: mm,
    })
}

impl From<(PosteriorGp, usize)> for Surrogate {
    fn from((gp, fidelities): (PosteriorGp, usize)) -> Self {
        Surrogate::SingleTask { gp, fidelities }
    }
}
