//! Exact Gaussian-process conditioning, generic over the covariance function.
//!
//! The same machinery backs the single-task RBF posterior and the multi-task LMC posterior:
//! only the covariance, prior mean and per-input noise differ.

use faer::{Mat, Par};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// A prior: covariance, constant-per-input mean, and observation noise.
pub trait Covariance {
    type Input: Clone;

    fn cov(&self, a: &Self::Input, b: &Self::Input) -> f64;

    /// Gradient of `cov(a, b)` with respect to the continuous coordinates of `a`.
    fn cov_grad(&self, a: &Self::Input, b: &Self::Input, out: &mut [f64]);

    fn prior_mean(&self, a: &Self::Input) -> f64;

    fn noise(&self, a: &Self::Input) -> f64;

    /// Magnitude of the covariance, used to scale jitter.
    fn scale(&self) -> f64;

    /// Number of continuous coordinates of an input.
    fn input_dim(&self) -> usize;
}

/// Posterior of a GP conditioned on one or more target vectors sharing the same inputs.
///
/// Multiple target columns exist for fantasies: the covariance (and its factor) depends
/// only on input locations, so all fantasy datasets share one factorization and differ
/// only in their weight vectors `alpha[:, s] = (K + N)⁻¹ (y_s − m)`.
#[derive(Debug, Clone)]
pub struct ExactPosterior<C: Covariance> {
    cov: C,
    inputs: Vec<C::Input>,
    targets: Mat<f64>,
    chol: Cholesky,
    alpha: Mat<f64>,
}

impl<C: Covariance> ExactPosterior<C> {
    /// Conditions on a single target vector.
    pub fn new(cov: C, inputs: Vec<C::Input>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Argument(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let targets = Mat::from_fn(targets.len(), 1, |i, _| targets[i]);
        Self::with_target_sets(cov, inputs, targets)
    }

    /// Conditions on every column of `targets` at once.
    pub fn with_target_sets(cov: C, inputs: Vec<C::Input>, targets: Mat<f64>) -> Result<Self> {
        let gram = noisy_gram(&cov, &inputs);
        let chol = Cholesky::factor(&gram, cov.scale())?;
        let alpha = weights(&cov, &inputs, &targets, &chol)?;
        Ok(ExactPosterior { cov, inputs, targets, chol, alpha })
    }

    pub fn covariance(&self) -> &C {
        &self.cov
    }

    pub fn inputs(&self) -> &[C::Input] {
        &self.inputs
    }

    /// First target column.
    pub fn targets(&self) -> Vec<f64> {
        self.targets.col(0).iter().copied().collect()
    }

    pub fn num_target_sets(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn factor(&self) -> &Cholesky {
        &self.chol
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn cross(&self, x: &C::Input) -> Vec<f64> {
        self.inputs.iter().map(|xi| self.cov.cov(x, xi)).collect()
    }

    fn mean_from_cross(&self, x: &C::Input, k: &[f64], set: usize) -> f64 {
        let col = self.alpha.col(set);
        self.cov.prior_mean(x) + k.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Posterior mean and latent variance (clamped at zero) for target set 0.
    pub fn predict(&self, x: &C::Input) -> (f64, f64) {
        let k = self.cross(x);
        let mean = self.mean_from_cross(x, &k, 0);
        let v = self.chol.solve_lower_vec(&k);
        let var = self.cov.cov(x, x) - v.iter().map(|a| a * a).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Latent variance and the posterior mean under every target set.
    pub fn predict_all_sets(&self, x: &C::Input) -> (Vec<f64>, f64) {
        let k = self.cross(x);
        let means = (0..self.num_target_sets()).map(|s| self.mean_from_cross(x, &k, s)).collect();
        let v = self.chol.solve_lower_vec(&k);
        let var = self.cov.cov(x, x) - v.iter().map(|a| a * a).sum::<f64>();
        (means, var.max(0.0))
    }

    /// Mean, variance, and their gradients with respect to `x`.
    pub fn predict_with_grad(&self, x: &C::Input) -> Prediction {
        let d = self.cov.input_dim();
        let n = self.len();
        let k = self.cross(x);
        let mean = self.mean_from_cross(x, &k, 0);
        let kinv_k = self.chol.solve_vec(&k);
        let prior_var = self.cov.cov(x, x);
        let var = prior_var - k.iter().zip(&kinv_k).map(|(a, b)| a * b).sum::<f64>();
        let mut dmean = vec![0.0; d];
        let mut dvar = vec![0.0; d];
        let mut g = vec![0.0; d];
        for i in 0..n {
            self.cov.cov_grad(x, &self.inputs[i], &mut g);
            let a = self.alpha[(i, 0)];
            for j in 0..d {
                dmean[j] += g[j] * a;
                dvar[j] -= 2.0 * g[j] * kinv_k[i];
            }
        }
        // stationary kernels: d k(x,x)/dx = 0
        Prediction { mean, variance: var.max(0.0), mean_grad: dmean, variance_grad: dvar }
    }

    /// Gradient of the posterior mean.
    pub fn mean_gradient(&self, x: &C::Input) -> Vec<f64> {
        let d = self.cov.input_dim();
        let mut out = vec![0.0; d];
        let mut g = vec![0.0; d];
        for (i, xi) in self.inputs.iter().enumerate() {
            self.cov.cov_grad(x, xi, &mut g);
            let a = self.alpha[(i, 0)];
            for j in 0..d {
                out[j] += g[j] * a;
            }
        }
        out
    }

    /// Means and variances at many inputs, using one triangular solve.
    pub fn predict_many(&self, xs: &[C::Input]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let g = xs.len();
        let mut means: Vec<f64> = xs.iter().map(|x| self.cov.prior_mean(x)).collect();
        let mut vars: Vec<f64> = xs.iter().map(|x| self.cov.cov(x, x)).collect();
        if n == 0 || g == 0 {
            return (means, vars);
        }
        let mut cross = Mat::from_fn(n, g, |i, j| self.cov.cov(&xs[j], &self.inputs[i]));
        for (j, m) in means.iter_mut().enumerate() {
            *m += (0..n).map(|i| cross[(i, j)] * self.alpha[(i, 0)]).sum::<f64>();
        }
        self.chol.solve_lower_in_place(cross.as_mut());
        for (j, v) in vars.iter_mut().enumerate() {
            let s: f64 = cross.col(j).iter().map(|a| a * a).sum();
            *v = (*v - s).max(0.0);
        }
        (means, vars)
    }

    /// Joint posterior of the latent function at `xs`: means (target set 0) and covariance.
    pub fn joint(&self, xs: &[C::Input]) -> (Vec<f64>, Mat<f64>) {
        let (means, cov) = self.joint_all_sets(xs);
        (means.col(0).iter().copied().collect(), cov)
    }

    /// Joint posterior at `xs`: a `len(xs) × sets` matrix of means and the shared covariance.
    pub fn joint_all_sets(&self, xs: &[C::Input]) -> (Mat<f64>, Mat<f64>) {
        let n = self.len();
        let g = xs.len();
        let sets = self.num_target_sets();
        let mut cov = Mat::from_fn(g, g, |i, j| self.cov.cov(&xs[i], &xs[j]));
        let mut means = Mat::from_fn(g, sets, |i, _| self.cov.prior_mean(&xs[i]));
        if n == 0 {
            return (means, cov);
        }
        let mut cross = Mat::from_fn(n, g, |i, j| self.cov.cov(&xs[j], &self.inputs[i]));
        faer::linalg::matmul::matmul(
            means.as_mut(),
            faer::Accum::Add,
            cross.transpose(),
            self.alpha.as_ref(),
            1.0,
            Par::Seq,
        );
        self.chol.solve_lower_in_place(cross.as_mut());
        faer::linalg::matmul::matmul(
            cov.as_mut(),
            faer::Accum::Add,
            cross.transpose(),
            cross.as_ref(),
            -1.0,
            Par::Seq,
        );
        for i in 0..g {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        (means, cov)
    }

    /// Posterior after appending observations, with unchanged hyperparameters.
    ///
    /// `extra_targets` has one row per new input and one column per target set of `self`;
    /// use [`ExactPosterior::fantasize`] to fan a single-set posterior out into many sets.
    pub fn extended(&self, extra_inputs: &[C::Input], extra_targets: &Mat<f64>) -> Result<Self>
    where
        C: Clone,
    {
        let sets = self.num_target_sets();
        if extra_targets.nrows() != extra_inputs.len() || extra_targets.ncols() != sets {
            return Err(Error::Argument("extra targets do not match inputs/target sets".into()));
        }
        let mut targets = Mat::zeros(self.len() + extra_inputs.len(), sets);
        for s in 0..sets {
            for i in 0..self.len() {
                targets[(i, s)] = self.targets[(i, s)];
            }
            for i in 0..extra_inputs.len() {
                targets[(self.len() + i, s)] = extra_targets[(i, s)];
            }
        }
        self.bordered(extra_inputs, targets)
    }

    /// Appends `pending` inputs and conditions on one fantasy target vector per column of
    /// `fantasies` (`pending.len() × S`), reusing this posterior's factorization.
    pub fn fantasize(&self, pending: &[C::Input], fantasies: &Mat<f64>) -> Result<Self>
    where
        C: Clone,
    {
        if fantasies.nrows() != pending.len() {
            return Err(Error::Argument("one fantasy row per pending input expected".into()));
        }
        let sets = fantasies.ncols();
        let n = self.len();
        let targets = Mat::from_fn(n + pending.len(), sets, |i, s| {
            if i < n {
                self.targets[(i, 0)]
            } else {
                fantasies[(i - n, s)]
            }
        });
        self.bordered(pending, targets)
    }

    fn bordered(&self, extra: &[C::Input], targets: Mat<f64>) -> Result<Self>
    where
        C: Clone,
    {
        let n = self.len();
        let q = extra.len();
        let border = Mat::from_fn(n, q, |i, j| self.cov.cov(&self.inputs[i], &extra[j]));
        let corner = Mat::from_fn(q, q, |i, j| {
            self.cov.cov(&extra[i], &extra[j]) + if i == j { self.cov.noise(&extra[i]) } else { 0.0 }
        });
        let chol = self.chol.extend(border.as_ref(), &corner, self.cov.scale())?;
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(extra);
        let alpha = weights(&self.cov, &inputs, &targets, &chol)?;
        Ok(ExactPosterior { cov: self.cov.clone(), inputs, targets, chol, alpha })
    }
}

/// Posterior mean/variance and their input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub mean_grad: Vec<f64>,
    pub variance_grad: Vec<f64>,
}

/// `K + diag(noise)` over `inputs`.
pub fn noisy_gram<C: Covariance>(cov: &C, inputs: &[C::Input]) -> Mat<f64> {
    let n = inputs.len();
    let mut k = Mat::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = cov.cov(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(j, j)] += cov.noise(&inputs[j]);
    }
    k
}

fn weights<C: Covariance>(
    cov: &C,
    inputs: &[C::Input],
    targets: &Mat<f64>,
    chol: &Cholesky,
) -> Result<Mat<f64>> {
    let mut alpha = Mat::from_fn(targets.nrows(), targets.ncols(), |i, s| {
        targets[(i, s)] - cov.prior_mean(&inputs[i])
    });
    chol.solve_in_place(alpha.as_mut());
    if alpha.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("posterior weights".into()));
    }
    Ok(alpha)
}

/// Log marginal likelihood of `targets` under the prior `cov`.
pub fn log_marginal_likelihood<C: Covariance>(cov: &C, inputs: &[C::Input], targets: &[f64]) -> Result<f64> {
    Ok(likelihood_terms(cov, inputs, targets, false)?.value)
}

/// Value of the log marginal likelihood and, optionally, the matrix `Q = ααᵀ − (K+N)⁻¹`
/// whose contraction `½ Σ Q_ij ∂(K+N)_ij` gives the gradient with respect to any
/// covariance parameter, plus `α` itself (for the constant-mean gradient `Σ α_i`).
pub(crate) struct LikelihoodTerms {
    pub value: f64,
    pub alpha: Vec<f64>,
    pub q: Option<Mat<f64>>,
}

pub(crate) fn likelihood_terms<C: Covariance>(
    cov: &C,
    inputs: &[C::Input],
    targets: &[f64],
    with_q: bool,
) -> Result<LikelihoodTerms> {
    let n = inputs.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Argument("likelihood needs matching, nonempty inputs and targets".into()));
    }
    let gram = noisy_gram(cov, inputs);
    let chol = Cholesky::factor(&gram, cov.scale())?;
    let centered: Vec<f64> = inputs.iter().zip(targets).map(|(x, y)| y - cov.prior_mean(x)).collect();
    let alpha = chol.solve_vec(&centered);
    let quad: f64 = centered.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let value = -0.5 * chol.log_det() - 0.5 * quad - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    let q = with_q.then(|| {
        let mut q = chol.inverse();
        for j in 0..n {
            for i in 0..n {
                q[(i, j)] = alpha[i] * alpha[j] - q[(i, j)];
            }
        }
        q
    });
    Ok(LikelihoodTerms { value, alpha, q })
}
