use mfabo::batch::{PendingQuery, PendingSet};
use mfabo::fidelity::*;
use mfabo::gp::{GpHyperparams, KernelParams};
use mfabo::mes::sample_max_values;
use mfabo::mf_model::{independent_from, lmc_from, FidelityDataset, LatentParams, LmcParams, Surrogate};
use mfabo::Point;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latent(ls: f64, a: Vec<Vec<f64>>, v: Vec<f64>) -> LatentParams {
    LatentParams { kernel: KernelParams::new(1.0, vec![ls]).unwrap(), a, v }
}

/// Three-fidelity LMC on 1-D data drawn from `seed`.
fn random_lmc(seed: u64) -> Surrogate {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let latents = (0..2)
        .map(|_| {
            latent(
                0.1 + 0.3 * r.random::<f64>(),
                (0..3).map(|_| vec![r.random::<f64>() - 0.5, r.random::<f64>() - 0.5]).collect(),
                (0..3).map(|_| 0.01 + 0.3 * r.random::<f64>()).collect(),
            )
        })
        .collect();
    let params = LmcParams::new(latents, vec![1e-3; 3], vec![0.0; 3]).unwrap();
    let mut data = FidelityDataset::new(3);
    for _ in 0..r.random_range(0..6) {
        let x = vec![r.random::<f64>()];
        data.push(x.clone(), r.random_range(1..=3), (5.0 * x[0]).sin());
    }
    lmc_from(&data, params).unwrap()
}

#[test]
fn variance_rule_worked_example() {
    // prior variance far from the only observation, so σ^(1) is known exactly
    let h = GpHyperparams::new(KernelParams::new(0.04, vec![0.05]).unwrap(), 1e-3, 0.0).unwrap();
    let mut data = FidelityDataset::new(2);
    data.push(vec![0.0], 1, 0.0);
    data.push(vec![0.0], 2, 0.0);
    let s = independent_from(&data, &[h.clone(), h]).unwrap();
    let x = [1.0];
    let (_, var) = s.predict(&x, 1).unwrap();
    assert!((var - 0.04).abs() < 1e-12);
    let beta = (0.09f64 * 0.09) / var; // √β σ^(1) = 0.09
    let state = |g| ThresholdState { gamma: vec![g], idle: vec![0], doubling: true };
    assert_eq!(variance_rule(&x, &s, beta, &state(0.1)).unwrap(), 2);
    assert_eq!(variance_rule(&x, &s, beta, &state(0.05)).unwrap(), 1);
    assert!(variance_rule(&x, &s, 0.0, &state(0.1)).is_err());
}

#[test]
fn threshold_bookkeeping_examples() {
    let delays = [1.0, 10.0];
    let start = ThresholdState::new(2, DEFAULT_GAMMA, true).unwrap();
    let mut s = start.clone();
    for _ in 0..30 {
        s = update_thresholds(&s, &delays, &[2, 1]);
    }
    assert_eq!(s.gamma, start.gamma);
    for _ in 0..11 {
        s = update_thresholds(&s, &delays, &[1]);
    }
    assert_eq!(s.gamma, vec![0.2]);
    for _ in 0..11 {
        s = update_thresholds(&s, &delays, &[]);
    }
    assert_eq!(s.gamma, vec![0.4]);
    let off = ThresholdState::new(2, DEFAULT_GAMMA, false).unwrap();
    let mut t = off.clone();
    for _ in 0..100 {
        t = update_thresholds(&t, &delays, &[1]);
    }
    assert_eq!(t.gamma, off.gamma);
    assert!(ThresholdState::new(2, 0.0, true).is_err());
}

fn fstar_grid() -> Vec<Point> {
    (0..=60).map(|i| vec![i as f64 / 60.0]).collect()
}

fn one_pending(x: f64, m: usize) -> PendingSet {
    let mut p = PendingSet::new();
    p.insert(PendingQuery { id: 0, x: vec![x], fidelity: m, submitted: 0, arrival: 5, space: 1.0 }).unwrap();
    p
}

#[test]
fn identical_fidelities_prefer_the_faster_one() {
    let params = LmcParams::new(vec![latent(0.2, vec![vec![1.0], vec![1.0]], vec![0.0, 0.0])], vec![1e-3; 2], vec![0.0; 2]).unwrap();
    let mut data = FidelityDataset::new(2);
    for x in [0.1, 0.35, 0.9] {
        data.push(vec![x], 2, (6.0 * x).sin());
    }
    let s = lmc_from(&data, params).unwrap();
    let pending = one_pending(0.5, 1);
    let picks = (0..20u64)
        .filter(|&seed| {
            let fstar = sample_max_values(&s, &fstar_grid(), 20, seed).unwrap();
            information_rule(&[0.65], &s, &pending, &fstar, &[1.0, 10.0], 20, seed).unwrap() == 1
        })
        .count();
    assert!(picks >= 18, "{picks}/20");
}

#[test]
fn uncorrelated_low_fidelity_is_never_worth_it() {
    let params = LmcParams::new(
        vec![latent(0.2, vec![vec![1.0], vec![0.0]], vec![0.0, 0.0]), latent(0.2, vec![vec![0.0], vec![1.0]], vec![0.0, 0.0])],
        vec![1e-3; 2],
        vec![0.0; 2],
    )
    .unwrap();
    let mut data = FidelityDataset::new(2);
    for x in [0.1, 0.5, 0.8] {
        data.push(vec![x], 1, x);
        data.push(vec![x + 0.05], 2, (6.0 * x).sin());
    }
    let s = lmc_from(&data, params).unwrap();
    let pending = one_pending(0.3, 2);
    let picks = (0..20u64)
        .filter(|&seed| {
            let fstar = sample_max_values(&s, &fstar_grid(), 20, seed).unwrap();
            information_rule(&[0.65], &s, &pending, &fstar, &[1.0, 10.0], 20, seed).unwrap() == 2
        })
        .count();
    assert!(picks >= 18, "{picks}/20");
}

#[test]
fn single_fidelity_information_rule_is_trivial() {
    let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.2]).unwrap(), 1e-3, 0.0).unwrap();
    let mut data = FidelityDataset::new(1);
    data.push(vec![0.3], 1, 1.0);
    let s = independent_from(&data, &[h]).unwrap();
    let fstar = sample_max_values(&s, &fstar_grid(), 5, 0).unwrap();
    assert_eq!(information_rule(&[0.2], &s, &PendingSet::new(), &fstar, &[1.0], 3, 0).unwrap(), 1);
}

fn gammas() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-3..2.0f64, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn raising_a_threshold_never_lowers_the_fidelity(
        seed in 0u64..200, x in 0.0..1.0f64, g in gammas(), which in 0usize..2, factor in 1.0..20.0f64, beta in 0.1..10.0f64,
    ) {
        let s = random_lmc(seed);
        let lo = ThresholdState { gamma: g.clone(), idle: vec![0; 2], doubling: true };
        let mut hi = lo.clone();
        hi.gamma[which] *= factor;
        prop_assert!(variance_rule(&[x], &s, beta, &hi).unwrap() >= variance_rule(&[x], &s, beta, &lo).unwrap());
    }

    #[test]
    fn threshold_extremes(seed in 0u64..200, x in 0.0..1.0f64, beta in 0.1..10.0f64) {
        let s = random_lmc(seed);
        let inf = ThresholdState { gamma: vec![f64::INFINITY; 2], idle: vec![0; 2], doubling: true };
        prop_assert_eq!(variance_rule(&[x], &s, beta, &inf).unwrap(), 3);
        prop_assert!(s.predict(&[x], 1).unwrap().1 > 0.0);
        let tiny = ThresholdState { gamma: vec![f64::MIN_POSITIVE; 2], idle: vec![0; 2], doubling: true };
        prop_assert_eq!(variance_rule(&[x], &s, beta, &tiny).unwrap(), 1);
    }

    #[test]
    fn thresholds_never_decrease(
        steps in proptest::collection::vec(proptest::collection::vec(1usize..=3, 0..4), 1..80),
        g in proptest::collection::vec(1e-3..1.0f64, 2),
        doubling in any::<bool>(),
    ) {
        let delays = [1.0, 3.0, 9.0];
        let mut s = ThresholdState { gamma: g, idle: vec![0; 2], doubling };
        for activity in &steps {
            let next = update_thresholds(&s, &delays, activity);
            prop_assert!(next.gamma.iter().zip(&s.gamma).all(|(a, b)| a >= b));
            prop_assert!(next.gamma.iter().all(|g| *g > 0.0));
            s = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn scaling_all_delays_keeps_the_choice(
        seed in 0u64..50, x in 0.0..1.0f64, d in proptest::collection::vec(0.1..10.0f64, 3), pow in -3i32..=3,
    ) {
        let s = random_lmc(seed);
        let fstar = sample_max_values(&s, &fstar_grid(), 8, seed).unwrap();
        let base = information_scores(&s, &[x], &fstar, &d).unwrap();
        let c = 2f64.powi(pow);
        let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
        let other = information_scores(&s, &[x], &fstar, &scaled).unwrap();
        prop_assert_eq!(best_fidelity(&base), best_fidelity(&other));
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a / c - b).abs() <= 1e-12 * a.abs());
        }
    }
}
