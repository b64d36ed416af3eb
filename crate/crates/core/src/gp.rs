//! Exact GP regression with an RBF-ARD kernel and a constant prior mean.

use crate::error::{ensure, Error, Result};
use crate::posterior::{self, Covariance, ExactPosterior};
use crate::train::{self, Interval, TrainConfig};
use crate::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    /// θ0, the prior variance.
    pub output_scale: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(output_scale: f64, lengthscales: Vec<f64>) -> Result<Self> {
        ensure(output_scale > 0.0 && output_scale.is_finite(), || {
            format!("output scale must be positive, got {output_scale}")
        })?;
        ensure(!lengthscales.is_empty(), || "at least one lengthscale required".into())?;
        ensure(lengthscales.iter().all(|l| *l > 0.0 && l.is_finite()), || {
            format!("lengthscales must be positive, got {lengthscales:?}")
        })?;
        Ok(KernelParams { output_scale, lengthscales })
    }

    pub fn isotropic(dim: usize, lengthscale: f64, output_scale: f64) -> Self {
        KernelParams { output_scale, lengthscales: vec![lengthscale; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[inline]
    pub(crate) fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((a, b), l) in x1.iter().zip(x2).zip(&self.lengthscales) {
            let z = (a - b) / l;
            s += z * z;
        }
        self.output_scale * (-0.5 * s).exp()
    }

    /// Adds `w · ∂k(x1,x2)/∂x1` to `out`.
    #[inline]
    pub(crate) fn add_grad(&self, x1: &[f64], x2: &[f64], w: f64, out: &mut [f64]) {
        let k = self.eval(x1, x2) * w;
        for (i, l) in self.lengthscales.iter().enumerate() {
            out[i] -= k * (x1[i] - x2[i]) / (l * l);
        }
    }
}

/// `θ0 · exp(−½ Σ ((x1_i − x2_i)/ℓ_i)²)`.
pub fn rbf_kernel(x1: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(x1, params.dim())?;
    check_dim(x2, params.dim())?;
    Ok(params.eval(x1, x2))
}

fn check_dim(x: &[f64], d: usize) -> Result<()> {
    ensure(x.len() == d, || format!("point of dimension {} where {d} expected", x.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperparams {
    pub kernel: KernelParams,
    /// η². Zero is accepted for noiseless evaluation of the likelihood and posterior.
    pub noise_variance: f64,
    pub mean_constant: f64,
}

impl GpHyperparams {
    pub fn new(kernel: KernelParams, noise_variance: f64, mean_constant: f64) -> Result<Self> {
        ensure(noise_variance >= 0.0 && noise_variance.is_finite(), || {
            format!("noise variance must be nonnegative, got {noise_variance}")
        })?;
        ensure(mean_constant.is_finite(), || "mean constant must be finite".into())?;
        Ok(GpHyperparams { kernel, noise_variance, mean_constant })
    }

    /// Starting point for training on unit-scaled inputs.
    pub fn initial(dim: usize) -> Self {
        GpHyperparams { kernel: KernelParams::isotropic(dim, 0.2, 1.0), noise_variance: 1e-3, mean_constant: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperPriorBox {
    pub lower: f64,
    pub upper: f64,
}

impl HyperPriorBox {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        ensure(lower < upper, || format!("box lower {lower} must be below upper {upper}"))?;
        Ok(HyperPriorBox { lower, upper })
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lower..=self.upper).contains(&v)
    }

    fn log_interval(&self) -> Interval {
        Interval { lower: self.lower.ln(), upper: self.upper.ln() }
    }

    fn interval(&self) -> Interval {
        Interval { lower: self.lower, upper: self.upper }
    }
}

/// Boxes of the smoothed box prior, one per hyperparameter kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBoxes {
    pub lengthscale: HyperPriorBox,
    pub output_scale: HyperPriorBox,
    pub noise: HyperPriorBox,
    pub mean: HyperPriorBox,
}

impl Default for PriorBoxes {
    /// Boxes for inputs in `[0,1]^d` and outputs of order one.
    fn default() -> Self {
        PriorBoxes {
            lengthscale: HyperPriorBox { lower: 0.025, upper: 0.6 },
            output_scale: HyperPriorBox { lower: 0.05, upper: 2.0 },
            noise: HyperPriorBox { lower: 1e-5, upper: 0.2 },
            mean: HyperPriorBox { lower: -1.0, upper: 1.0 },
        }
    }
}

/// Which hyperparameters training may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub output_scale: bool,
    pub lengthscales: bool,
    pub noise: bool,
    pub mean: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { output_scale: true, lengthscales: true, noise: true, mean: true };
    /// Scale and noise only; lengthscales and mean stay frozen.
    pub const SCALE_AND_NOISE: Trainable =
        Trainable { output_scale: true, lengthscales: false, noise: true, mean: false };
}

/// Covariance function of a single-task GP.
#[derive(Debug, Clone, PartialEq)]
pub struct Rbf {
    pub hyper: GpHyperparams,
}

impl Covariance for Rbf {
    type Input = Point;

    fn cov(&self, a: &Point, b: &Point) -> f64 {
        self.hyper.kernel.eval(a, b)
    }

    fn cov_grad(&self, a: &Point, b: &Point, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.hyper.kernel.add_grad(a, b, 1.0, out);
    }

    fn prior_mean(&self, _: &Point) -> f64 {
        self.hyper.mean_constant
    }

    fn noise(&self, _: &Point) -> f64 {
        self.hyper.noise_variance
    }

    fn scale(&self) -> f64 {
        self.hyper.kernel.output_scale
    }

    fn input_dim(&self) -> usize {
        self.hyper.kernel.dim()
    }
}

/// A single-task GP posterior.
pub type PosteriorGp = ExactPosterior<Rbf>;

impl ExactPosterior<Rbf> {
    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.covariance().hyper
    }
}

fn check_data(inputs: &[Point], targets: &[f64], d: usize) -> Result<()> {
    ensure(inputs.len() == targets.len(), || {
        format!("{} inputs but {} targets", inputs.len(), targets.len())
    })?;
    for x in inputs {
        check_dim(x, d)?;
    }
    ensure(targets.iter().all(|y| y.is_finite()), || "targets must be finite".into())
}

/// Conditions a GP prior on data.
pub fn condition(inputs: Vec<Point>, targets: Vec<f64>, hyper: GpHyperparams) -> Result<PosteriorGp> {
    check_data(&inputs, &targets, hyper.kernel.dim())?;
    ExactPosterior::new(Rbf { hyper }, inputs, targets)
}

/// Posterior mean and variance of the latent function at `x`.
pub fn posterior_predict(model: &PosteriorGp, x: &[f64]) -> Result<(f64, f64)> {
    check_dim(x, model.hyperparams().kernel.dim())?;
    Ok(model.predict(&x.to_vec()))
}

/// Gradient of the posterior mean at `x`.
pub fn posterior_gradient_mean(model: &PosteriorGp, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(x, model.hyperparams().kernel.dim())?;
    Ok(model.mean_gradient(&x.to_vec()))
}

pub fn log_marginal_likelihood(inputs: &[Point], targets: &[f64], hyper: &GpHyperparams) -> Result<f64> {
    check_data(inputs, targets, hyper.kernel.dim())?;
    posterior::log_marginal_likelihood(&Rbf { hyper: hyper.clone() }, inputs, targets)
}

/// Log marginal likelihood and its gradient with respect to
/// `[log θ0, log ℓ_1..log ℓ_d, log η², μ0]`.
pub fn log_marginal_likelihood_grad(
    inputs: &[Point],
    targets: &[f64],
    hyper: &GpHyperparams,
) -> Result<(f64, Vec<f64>)> {
    check_data(inputs, targets, hyper.kernel.dim())?;
    let cov = Rbf { hyper: hyper.clone() };
    let terms = posterior::likelihood_terms(&cov, inputs, targets, true)?;
    let q = terms.q.expect("requested");
    let kp = &hyper.kernel;
    let d = kp.dim();
    let n = inputs.len();
    let mut grad = vec![0.0; d + 3];
    let inv_l2: Vec<f64> = kp.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    for j in 0..n {
        for i in 0..n {
            let k = kp.eval(&inputs[i], &inputs[j]);
            let w = 0.5 * q[(i, j)] * k;
            grad[0] += w;
            for a in 0..d {
                let z = inputs[i][a] - inputs[j][a];
                grad[1 + a] += w * z * z * inv_l2[a];
            }
        }
        grad[d + 1] += 0.5 * q[(j, j)] * hyper.noise_variance;
    }
    grad[d + 2] = terms.alpha.iter().sum();
    Ok((terms.value, grad))
}

fn encode(h: &GpHyperparams, mask: Trainable, boxes: &PriorBoxes) -> (Vec<f64>, Vec<Interval>) {
    let mut theta = Vec::new();
    let mut iv = Vec::new();
    if mask.output_scale {
        theta.push(h.kernel.output_scale.ln());
        iv.push(boxes.output_scale.log_interval());
    }
    if mask.lengthscales {
        for l in &h.kernel.lengthscales {
            theta.push(l.ln());
            iv.push(boxes.lengthscale.log_interval());
        }
    }
    if mask.noise {
        theta.push(h.noise_variance.max(boxes.noise.lower).ln());
        iv.push(boxes.noise.log_interval());
    }
    if mask.mean {
        theta.push(h.mean_constant);
        iv.push(boxes.mean.interval());
    }
    (theta, iv)
}

fn decode(theta: &[f64], base: &GpHyperparams, mask: Trainable) -> GpHyperparams {
    let mut h = base.clone();
    let mut it = theta.iter().copied();
    if mask.output_scale {
        h.kernel.output_scale = it.next().unwrap().exp();
    }
    if mask.lengthscales {
        for l in h.kernel.lengthscales.iter_mut() {
            *l = it.next().unwrap().exp();
        }
    }
    if mask.noise {
        h.noise_variance = it.next().unwrap().exp();
    }
    if mask.mean {
        h.mean_constant = it.next().unwrap();
    }
    h
}

fn select_grad(full: &[f64], mask: Trainable) -> Vec<f64> {
    let d = full.len() - 3;
    let mut g = Vec::new();
    if mask.output_scale {
        g.push(full[0]);
    }
    if mask.lengthscales {
        g.extend_from_slice(&full[1..=d]);
    }
    if mask.noise {
        g.push(full[d + 1]);
    }
    if mask.mean {
        g.push(full[d + 2]);
    }
    g
}

/// Maximizes the box-penalized marginal likelihood over all hyperparameters.
pub fn fit_hyperparameters(
    inputs: &[Point],
    targets: &[f64],
    init: &GpHyperparams,
    boxes: &PriorBoxes,
    cfg: &TrainConfig,
) -> Result<GpHyperparams> {
    fit_hyperparameters_masked(inputs, targets, init, boxes, cfg, Trainable::ALL)
}

/// As [`fit_hyperparameters`], moving only the hyperparameters selected by `mask`.
pub fn fit_hyperparameters_masked(
    inputs: &[Point],
    targets: &[f64],
    init: &GpHyperparams,
    boxes: &PriorBoxes,
    cfg: &TrainConfig,
    mask: Trainable,
) -> Result<GpHyperparams> {
    if inputs.is_empty() {
        return Err(Error::Training { epochs: 0, reason: "no training data".into() });
    }
    check_data(inputs, targets, init.kernel.dim())?;
    let idx = train::subset_indices(inputs.len(), cfg.max_points, cfg.seed);
    let (xs, ys): (Vec<Point>, Vec<f64>) = idx.iter().map(|&i| (inputs[i].clone(), targets[i])).unzip();
    let (theta0, iv) = encode(init, mask, boxes);
    if theta0.is_empty() {
        return Ok(init.clone());
    }
    let trained = train::maximize(&theta0, &iv, cfg, |theta| {
        let h = decode(theta, init, mask);
        let (v, g) = log_marginal_likelihood_grad(&xs, &ys, &h)?;
        Ok((v, select_grad(&g, mask)))
    })?;
    Ok(decode(&trained.params, init, mask))
}
