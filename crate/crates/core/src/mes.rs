//! Max-value entropy search.
//!
//! For a query at fidelity `m`, let `y = f^(m)(x) + ε` and let `ρ` be the posterior
//! correlation between `y` and `f^(M)(x)`. Conditioning on `f^(M)(x) ≤ f*` and writing
//! `γ = (f* − μ_M)/σ_M`, the standardized observation `u` has density
//! `q(u) = φ(u) Φ(a(u)) / Φ(γ)` with `a(u) = (γ − ρu)/√(1−ρ²)`, and the entropy reduction is
//!
//! ```text
//! I(γ, ρ) = ρ² γ φ(γ) / (2Φ(γ)) − log Φ(γ) + E_q[log Φ(a(u))].
//! ```
//!
//! The first two terms are closed form (the second moment of `q` is known). The expectation
//! is the only integral left; it is evaluated with the trapezium rule.

use std::sync::OnceLock;

use statrs::function::erf::erfc;

use crate::error::{ensure, Error, Result};
use crate::mf_model::{GridSampler, Surrogate, GRID_CAP};
use crate::{rng, Fidelity, Point};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Trapezium intervals of the entropy integral.
pub const INTERVALS: usize = 500;
/// Integrand magnitude that the integration range must reach at its endpoints.
pub const CUTOFF: f64 = 1e-30;
/// Candidate half-widths are `10^k` for `k` in this range.
pub const RANGE_EXPONENTS: std::ops::RangeInclusive<i32> = -6..=2;

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `log Φ(z)`, accurate far into the lower tail.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > -30.0 {
        norm_cdf(z).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)).ln()
    }
}

/// `φ(z)/Φ(z)`, stable for very negative `z`.
pub fn inverse_mills(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI - log_norm_cdf(z)).exp()
}

/// `Φ(a) log Φ(a)`.
fn phi_log_phi(a: f64) -> f64 {
    let l = log_norm_cdf(a);
    l.exp() * l
}

/// Trapezium nodes on `[−10^k, 10^k]` with `g(node)` precomputed, one table per `k`.
fn g_table(k: i32) -> &'static [f64] {
    static TABLES: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| {
        RANGE_EXPONENTS
            .map(|k| {
                let half = 10f64.powi(k);
                let h = 2.0 * half / INTERVALS as f64;
                (0..=INTERVALS).map(|i| phi_log_phi(-half + h * i as f64)).collect()
            })
            .collect()
    });
    &tables[(k - RANGE_EXPONENTS.start()) as usize]
}

fn trapezium(values: impl Iterator<Item = f64>, h: f64) -> f64 {
    let mut s = 0.0;
    let mut first = None;
    let mut last = 0.0;
    for v in values {
        if first.is_none() {
            first = Some(v);
        }
        s += v;
        last = v;
    }
    h * (s - 0.5 * (first.unwrap_or(0.0) + last))
}

/// Smallest `k` whose endpoints `±10^k` bring `|integrand|` below the cutoff.
fn range_exponent(integrand: impl Fn(f64) -> f64) -> i32 {
    for k in RANGE_EXPONENTS {
        let half = 10f64.powi(k);
        if integrand(-half).abs() < CUTOFF && integrand(half).abs() < CUTOFF {
            return k;
        }
    }
    *RANGE_EXPONENTS.end()
}

/// `E_q[log Φ(a(u))]` for one `(γ, ρ)`.
fn expected_log_cdf(gamma: f64, rho: f64, log_cdf_gamma: f64) -> f64 {
    let t = (1.0 - rho * rho).sqrt();
    let w = t / rho.abs();
    if w <= 1.0 {
        // integrate over a: u(a) = (γ − a t)/ρ, du = (t/|ρ|) da
        let weight = |a: f64| {
            let u = (gamma - a * t) / rho;
            (-0.5 * u * u - LN_SQRT_2PI - log_cdf_gamma).exp()
        };
        let k = range_exponent(|a| weight(a) * phi_log_phi(a));
        let half = 10f64.powi(k);
        let h = 2.0 * half / INTERVALS as f64;
        let g = g_table(k);
        w * trapezium((0..=INTERVALS).map(|i| weight(-half + h * i as f64) * g[i]), h)
    } else {
        let integrand = |u: f64| {
            let a = (gamma - rho * u) / t;
            let l = log_norm_cdf(a);
            (-0.5 * u * u - LN_SQRT_2PI + l - log_cdf_gamma).exp() * l
        };
        let k = range_exponent(integrand);
        let half = 10f64.powi(k);
        let h = 2.0 * half / INTERVALS as f64;
        trapezium((0..=INTERVALS).map(|i| integrand(-half + h * i as f64)), h)
    }
}

/// Entropy reduction of a standardized observation with correlation `ρ` to the target,
/// given the standardized max value `γ` (not clamped).
pub fn gain_standardized(gamma: f64, rho: f64) -> f64 {
    if !gamma.is_finite() {
        return if gamma > 0.0 { 0.0 } else { f64::INFINITY };
    }
    let rho = rho.clamp(-1.0, 1.0);
    if rho == 0.0 {
        return 0.0;
    }
    let lc = log_norm_cdf(gamma);
    let closed = 0.5 * rho * rho * gamma * inverse_mills(gamma) - lc;
    if 1.0 - rho * rho < 1e-12 {
        // f^(M) is a deterministic function of y: plain truncated-normal entropy
        return closed;
    }
    closed + expected_log_cdf(gamma, rho, lc)
}

/// Posterior quantities MES needs at one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MesInputs {
    /// Mean of `f^(M)(x)`.
    pub mean_target: f64,
    /// Variance of `f^(M)(x)`.
    pub var_target: f64,
    /// Variance of the observation `y = f^(m)(x) + ε`.
    pub var_obs: f64,
    /// Covariance of `f^(m)(x)` and `f^(M)(x)`.
    pub cov: f64,
}

/// Monte-Carlo information gain over the max-value samples, before clamping.
pub fn information_gain(p: &MesInputs, fstar: &[f64]) -> f64 {
    if p.var_obs <= 0.0 || p.var_target <= 0.0 || fstar.is_empty() {
        return 0.0;
    }
    let sd = p.var_target.sqrt();
    let rho = p.cov / (p.var_obs.sqrt() * sd);
    if rho.abs() < 1e-12 {
        return 0.0;
    }
    fstar.iter().map(|f| gain_standardized((f - p.mean_target) / sd, rho)).sum::<f64>() / fstar.len() as f64
}

/// Sampled optima `f*_1..f*_S` of the target fidelity.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxValueSamples {
    pub values: Vec<f64>,
    pub grid_size: usize,
    pub seed: u64,
}

/// Each value is the grid maximum of an independent joint posterior sample of `f^(M)`.
pub fn sample_max_values(surrogate: &Surrogate, grid: &[Point], count: usize, seed: u64) -> Result<MaxValueSamples> {
    let sampler = GridSampler::new(surrogate, grid, surrogate.fidelities(), GRID_CAP)?;
    Ok(sample_max_values_from(&sampler, count, seed))
}

pub fn sample_max_values_from(sampler: &GridSampler, count: usize, seed: u64) -> MaxValueSamples {
    let values = (0..count)
        .map(|s| {
            let draw = sampler.sample_seeded(rng::derive_seed(seed, &[rng::purpose::MAX_VALUE, s as u64]));
            draw.into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    MaxValueSamples { values, grid_size: sampler.len(), seed }
}

/// MES inputs at `(x, m)` for every target set (fantasy) of the surrogate.
pub fn mes_inputs(surrogate: &Surrogate, x: &[f64], m: Fidelity) -> Result<Vec<MesInputs>> {
    let top = surrogate.fidelities();
    let noise = surrogate.noise(m);
    if m == top {
        let (means, var) = surrogate.predict_sets(x, m)?;
        return Ok(means
            .into_iter()
            .map(|mean| MesInputs { mean_target: mean, var_target: var, var_obs: var + noise, cov: var })
            .collect());
    }
    let (means, cov) = surrogate.joint_sets(&[(x.to_vec(), m), (x.to_vec(), top)])?;
    Ok((0..means.ncols())
        .map(|s| MesInputs {
            mean_target: means[(1, s)],
            var_target: cov[(1, 1)].max(0.0),
            var_obs: cov[(0, 0)].max(0.0) + noise,
            cov: cov[(0, 1)],
        })
        .collect())
}

/// Unclamped MES, averaged over the surrogate's target sets.
pub fn mes_unclamped(surrogate: &Surrogate, x: &[f64], m: Fidelity, fstar: &MaxValueSamples) -> Result<f64> {
    ensure(!fstar.values.is_empty(), || "at least one max-value sample required".into())?;
    let sets = mes_inputs(surrogate, x, m)?;
    let v = sets.iter().map(|p| information_gain(p, &fstar.values)).sum::<f64>() / sets.len() as f64;
    if v.is_nan() {
        return Err(Error::NonFinite("max-value entropy search".into()));
    }
    Ok(v)
}

/// Information gained about `f*` by observing `f^(m)(x)`, clamped at zero.
pub fn mes(surrogate: &Surrogate, x: &[f64], m: Fidelity, fstar: &MaxValueSamples) -> Result<f64> {
    Ok(mes_unclamped(surrogate, x, m, fstar)?.max(0.0))
}

/// `mes / cost`.
pub fn mf_mes_score(surrogate: &Surrogate, x: &[f64], m: Fidelity, fstar: &MaxValueSamples, cost: f64) -> Result<f64> {
    ensure(cost > 0.0 && cost.is_finite(), || format!("cost must be positive, got {cost}"))?;
    Ok(mes(surrogate, x, m, fstar)? / cost)
}
