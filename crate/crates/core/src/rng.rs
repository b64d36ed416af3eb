//! Keyed random streams and low-discrepancy point sets.
//!
//! Every random decision in a run draws from a stream keyed by `(run seed, purpose, ...)`,
//! so two code paths that make the same decision with the same key see the same numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::Point;

/// Stream purposes. Values are part of the reproducibility contract of result files.
pub mod purpose {
    pub const INITIAL_DESIGN: u64 = 1;
    pub const RANDOM_FILL: u64 = 2;
    pub const SCREEN: u64 = 3;
    pub const OBSERVATION_NOISE: u64 = 4;
    pub const DELAY: u64 = 5;
    pub const FANTASY: u64 = 6;
    pub const MAX_VALUE: u64 = 7;
    pub const THOMPSON: u64 = 8;
    pub const TRAIN_SUBSET: u64 = 9;
    pub const LIPSCHITZ: u64 = 10;
    pub const TRUST_GRID: u64 = 11;
    pub const BENCHMARK: u64 = 12;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of keys into a new seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn keyed_stream(base: u64, keys: &[u64]) -> ChaCha8Rng {
    stream(derive_seed(base, keys))
}

pub fn standard_normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn uniform_point<R: Rng>(rng: &mut R, dim: usize) -> Point {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

pub fn uniform_points<R: Rng>(rng: &mut R, dim: usize, n: usize) -> Vec<Point> {
    (0..n).map(|_| uniform_point(rng, dim)).collect()
}

/// First `n` points of the Sobol sequence in `[0,1)^dim`, optionally randomized by a
/// Cranley–Patterson rotation (a uniform shift modulo one) drawn from `shift_seed`.
pub fn sobol_points(dim: usize, n: usize, shift_seed: Option<u64>) -> Vec<Point> {
    if dim == 0 {
        return vec![Vec::new(); n];
    }
    let params = JoeKuoD6::standard();
    let seq = Sobol::<f64>::new(dim, &params);
    let shift = shift_seed.map(|s| uniform_point(&mut stream(s), dim));
    seq.take(n)
        .map(|mut p| {
            if let Some(shift) = &shift {
                for (v, s) in p.iter_mut().zip(shift) {
                    *v = (*v + s).fract();
                }
            }
            p
        })
        .collect()
}
