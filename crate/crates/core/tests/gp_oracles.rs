use mfabo::gp::*;
use mfabo::train::TrainConfig;
use mfabo::Point;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (Vec<Point>, Vec<f64>) {
    let xs: Vec<Point> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let ys = xs.iter().map(|x| x.iter().map(|v| (4.0 * v).sin()).sum::<f64>() + 0.1 * rng.random::<f64>()).collect();
    (xs, ys)
}

fn hyper(rng: &mut ChaCha8Rng, d: usize) -> GpHyperparams {
    GpHyperparams::new(
        KernelParams::new(0.5 + rng.random::<f64>(), (0..d).map(|_| 0.1 + 0.5 * rng.random::<f64>()).collect()).unwrap(),
        0.001 + 0.05 * rng.random::<f64>(),
        rng.random::<f64>() - 0.5,
    )
    .unwrap()
}

/// Conditions the (N+1)-dimensional joint Gaussian directly, with nalgebra's inverse.
fn oracle(xs: &[Point], ys: &[f64], h: &GpHyperparams, x: &[f64]) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| {
        let s: f64 = a.iter().zip(b).zip(&h.kernel.lengthscales).map(|((p, q), l)| ((p - q) / l).powi(2)).sum();
        h.kernel.output_scale * (-0.5 * s).exp()
    };
    let n = xs.len();
    let kk = DMatrix::from_fn(n, n, |i, j| k(&xs[i], &xs[j]) + if i == j { h.noise_variance } else { 0.0 });
    let kx = DVector::from_fn(n, |i, _| k(&xs[i], x));
    let inv = kk.try_inverse().unwrap();
    let r = DVector::from_fn(n, |i, _| ys[i] - h.mean_constant);
    let mean = h.mean_constant + (kx.transpose() * &inv * r)[0];
    let var = k(x, x) - (kx.transpose() * &inv * &kx)[0];
    (mean, var)
}

#[test]
fn posterior_matches_joint_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let d = 1 + case % 3;
        let n = 1 + rng.random_range(0..8);
        let (xs, ys) = random_data(&mut rng, d, n);
        let h = hyper(&mut rng, d);
        let model = condition(xs.clone(), ys.clone(), h.clone()).unwrap();
        for _ in 0..5 {
            let x: Point = (0..d).map(|_| rng.random::<f64>()).collect();
            let (m, v) = posterior_predict(&model, &x).unwrap();
            let (mo, vo) = oracle(&xs, &ys, &h, &x);
            assert!((m - mo).abs() < 1e-8 && (v - vo.max(0.0)).abs() < 1e-8, "case {case}: {m} {mo} {v} {vo}");
        }
    }
}

#[test]
fn noiseless_point_is_interpolated() {
    let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.3]).unwrap(), 0.0, 0.2).unwrap();
    let m = condition(vec![vec![0.4]], vec![0.2], h).unwrap();
    let (mean, var) = posterior_predict(&m, &[0.4]).unwrap();
    assert!((mean - 0.2).abs() < 1e-12 && var < 1e-12);
}

#[test]
fn likelihood_matches_bivariate_normal_density() {
    let h = GpHyperparams::new(KernelParams::new(1.2, vec![0.4]).unwrap(), 0.05, 0.1).unwrap();
    let xs = vec![vec![0.1], vec![0.5]];
    let ys = [0.7, -0.3];
    let k12 = 1.2 * (-0.5 * (0.4f64 / 0.4).powi(2)).exp();
    let (a, b, c) = (1.25, k12, 1.25);
    let det = a * c - b * b;
    let (r1, r2) = (ys[0] - 0.1, ys[1] - 0.1);
    let quad = (c * r1 * r1 - 2.0 * b * r1 * r2 + a * r2 * r2) / det;
    let expected = -0.5 * det.ln() - 0.5 * quad - (2.0 * std::f64::consts::PI).ln();
    let v = log_marginal_likelihood(&xs, &ys, &h).unwrap();
    assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");

    let h1 = GpHyperparams::new(KernelParams::new(0.8, vec![0.4]).unwrap(), 0.05, 0.3).unwrap();
    let v1 = log_marginal_likelihood(&[vec![0.2]], &[0.3], &h1).unwrap();
    assert!((v1 - (-0.5 * 0.85f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
}

fn with_theta(h: &GpHyperparams, theta: &[f64]) -> GpHyperparams {
    let d = h.kernel.dim();
    GpHyperparams {
        kernel: KernelParams { output_scale: theta[0].exp(), lengthscales: theta[1..=d].iter().map(|t| t.exp()).collect() },
        noise_variance: theta[d + 1].exp(),
        mean_constant: theta[d + 2],
    }
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10 {
        let d = 1 + case % 3;
        let (xs, ys) = random_data(&mut rng, d, 12);
        let h = hyper(&mut rng, d);
        let (_, grad) = log_marginal_likelihood_grad(&xs, &ys, &h).unwrap();
        let mut theta = vec![h.kernel.output_scale.ln()];
        theta.extend(h.kernel.lengthscales.iter().map(|l| l.ln()));
        theta.push(h.noise_variance.ln());
        theta.push(h.mean_constant);
        for p in 0..theta.len() {
            let step = 1e-5;
            let mut up = theta.clone();
            up[p] += step;
            let mut dn = theta.clone();
            dn[p] -= step;
            let fd = (log_marginal_likelihood(&xs, &ys, &with_theta(&h, &up)).unwrap()
                - log_marginal_likelihood(&xs, &ys, &with_theta(&h, &dn)).unwrap())
                / (2.0 * step);
            let rel = (fd - grad[p]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "case {case} param {p}: fd {fd} analytic {}", grad[p]);
        }
    }
}

#[test]
fn gradient_mean_matches_finite_differences() {
    let xs = vec![vec![0.1], vec![0.35], vec![0.6], vec![0.9]];
    let ys = vec![0.3, -0.2, 0.8, 0.1];
    let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.2]).unwrap(), 0.01, 0.0).unwrap();
    let m = condition(xs, ys, h).unwrap();
    for x in [0.05, 0.27, 0.5, 0.77] {
        let g = posterior_gradient_mean(&m, &[x]).unwrap()[0];
        let fd = (posterior_predict(&m, &[x + 1e-5]).unwrap().0 - posterior_predict(&m, &[x - 1e-5]).unwrap().0) / 2e-5;
        assert!((g - fd).abs() / fd.abs().max(1e-8) < 1e-4, "{g} vs {fd}");
    }
}

#[test]
fn symmetric_data_has_zero_gradient_at_center() {
    let xs = vec![vec![-0.3], vec![-0.1], vec![0.1], vec![0.3]];
    let ys = vec![0.5, 0.2, 0.2, 0.5];
    let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.2]).unwrap(), 0.01, 0.0).unwrap();
    let m = condition(xs, ys, h).unwrap();
    assert!(posterior_gradient_mean(&m, &[0.0]).unwrap()[0].abs() < 1e-12);
}

/// Exact GP draw on a grid, via nalgebra's Cholesky.
fn gp_sample(xs: &[f64], ls: f64, seed: u64) -> Vec<f64> {
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| (-0.5 * ((xs[i] - xs[j]) / ls).powi(2)).exp() + if i == j { 1e-4 } else { 0.0 });
    let l = k.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    (l * z).iter().copied().collect()
}

#[test]
fn training_recovers_lengthscale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let ys = gp_sample(&xs, 0.2, 9);
    let inputs: Vec<Point> = xs.iter().map(|x| vec![*x]).collect();
    let init = GpHyperparams::new(KernelParams::new(0.5, vec![0.05]).unwrap(), 0.01, 0.0).unwrap();
    let cfg = TrainConfig { max_points: 500, ..Default::default() };
    let h = fit_hyperparameters(&inputs, &ys, &init, &PriorBoxes::default(), &cfg).unwrap();
    let l = h.kernel.lengthscales[0];
    assert!((0.1..=0.4).contains(&l), "recovered lengthscale {l}");
}

#[test]
fn flat_data_recovers_mean_constant_in_box() {
    let inputs: Vec<Point> = (0..15).map(|i| vec![i as f64 / 14.0]).collect();
    for c in [0.4, 3.0] {
        let ys = vec![c; 15];
        let h = fit_hyperparameters(&inputs, &ys, &GpHyperparams::initial(1), &PriorBoxes::default(), &TrainConfig::default())
            .unwrap();
        let target = c.clamp(-1.0, 1.0);
        assert!((h.mean_constant - target).abs() < 0.1, "c={c}: mean {}", h.mean_constant);
    }
}

#[test]
fn training_never_worsens_the_projected_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let boxes = PriorBoxes::default();
    for _ in 0..5 {
        let (xs, ys) = random_data(&mut rng, 2, 20);
        let init = hyper(&mut rng, 2);
        let mut start = init.clone();
        start.kernel.lengthscales.iter_mut().for_each(|l| *l = l.clamp(0.025, 0.6));
        start.kernel.output_scale = start.kernel.output_scale.clamp(0.05, 2.0);
        start.noise_variance = start.noise_variance.clamp(1e-5, 0.2);
        let h = fit_hyperparameters(&xs, &ys, &init, &boxes, &TrainConfig::default()).unwrap();
        let before = log_marginal_likelihood(&xs, &ys, &start).unwrap();
        let after = log_marginal_likelihood(&xs, &ys, &h).unwrap();
        assert!(after >= before - 1e-9);
        assert!(h.kernel.lengthscales.iter().all(|l| boxes.lengthscale.contains(*l)));
        assert!(boxes.output_scale.contains(h.kernel.output_scale) && boxes.noise.contains(h.noise_variance));
    }
}

#[test]
fn stationary_start_is_kept() {
    // the likelihood is maximized over the mean at the generalized least-squares estimate
    let xs: Vec<Point> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
    let ys = vec![0.1, 0.4, -0.2, 0.3, 0.0, 0.25];
    let kp = KernelParams::new(1.0, vec![0.3]).unwrap();
    let k = DMatrix::from_fn(6, 6, |i, j| rbf_kernel(&xs[i], &xs[j], &kp).unwrap() + if i == j { 0.01 } else { 0.0 });
    let inv = k.try_inverse().unwrap();
    let one = DVector::from_element(6, 1.0);
    let y = DVector::from_vec(ys.clone());
    let gls = (one.transpose() * &inv * &y)[0] / (one.transpose() * &inv * &one)[0];
    let init = GpHyperparams::new(kp, 0.01, gls).unwrap();
    let only_mean = Trainable { output_scale: false, lengthscales: false, noise: false, mean: true };
    let h = fit_hyperparameters_masked(&xs, &ys, &init, &PriorBoxes::default(), &TrainConfig::default(), only_mean).unwrap();
    let a = log_marginal_likelihood(&xs, &ys, &init).unwrap();
    let b = log_marginal_likelihood(&xs, &ys, &h).unwrap();
    assert!((b - a).abs() < 1e-6, "{a} vs {b}");
}

fn arb_points(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn variance_never_grows_with_data(xs in arb_points(2, 1..10), extra in arb_points(2, 1..2), probe in arb_points(2, 1..2)) {
        let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.3, 0.2]).unwrap(), 0.01, 0.0).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] - x[1]).collect();
        let a = condition(xs.clone(), ys.clone(), h.clone()).unwrap();
        let mut xs2 = xs.clone();
        xs2.push(extra[0].clone());
        let mut ys2 = ys.clone();
        ys2.push(0.3);
        let b = condition(xs2, ys2, h).unwrap();
        let va = posterior_predict(&a, &probe[0]).unwrap().1;
        let vb = posterior_predict(&b, &probe[0]).unwrap().1;
        prop_assert!(vb <= va + 1e-8);
    }

    #[test]
    fn near_noiseless_training_points_are_interpolated(xs in arb_points(2, 1..8)) {
        let mut uniq = xs.clone();
        uniq.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-3));
        let ys: Vec<f64> = uniq.iter().map(|x| (3.0 * x[0]).cos() + x[1]).collect();
        let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.2, 0.2]).unwrap(), 1e-10, 0.0).unwrap();
        let m = condition(uniq.clone(), ys.clone(), h).unwrap();
        for (x, y) in uniq.iter().zip(&ys) {
            prop_assert!((posterior_predict(&m, x).unwrap().0 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn likelihood_is_permutation_invariant(xs in arb_points(3, 2..10), seed in any::<u64>()) {
        let ys: Vec<f64> = xs.iter().map(|x| x.iter().sum::<f64>()).collect();
        let h = GpHyperparams::new(KernelParams::new(0.7, vec![0.3, 0.4, 0.5]).unwrap(), 0.02, 0.1).unwrap();
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let px: Vec<Point> = idx.iter().map(|&i| xs[i].clone()).collect();
        let py: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        let a = log_marginal_likelihood(&xs, &ys, &h).unwrap();
        let b = log_marginal_likelihood(&px, &py, &h).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn kernel_is_symmetric_and_gram_psd(xs in arb_points(2, 1..20)) {
        let p = KernelParams::new(1.3, vec![0.2, 0.5]).unwrap();
        for a in &xs {
            for b in &xs {
                prop_assert_eq!(rbf_kernel(a, b, &p).unwrap(), rbf_kernel(b, a, &p).unwrap());
            }
        }
        let n = xs.len();
        let g = faer::Mat::from_fn(n, n, |i, j| rbf_kernel(&xs[i], &xs[j], &p).unwrap() + if i == j { 1e-10 } else { 0.0 });
        prop_assert!(mfabo::linalg::Cholesky::factor(&g, 1.3).is_ok());
    }

    #[test]
    fn gradient_mean_matches_fd_at_random_points(xs in arb_points(2, 3..8), probe in arb_points(2, 20..21)) {
        let ys: Vec<f64> = xs.iter().map(|x| (5.0 * x[0]).sin() * x[1]).collect();
        let h = GpHyperparams::new(KernelParams::new(1.0, vec![0.3, 0.25]).unwrap(), 0.01, 0.0).unwrap();
        let m = condition(xs, ys, h).unwrap();
        for x in &probe {
            let g = posterior_gradient_mean(&m, x).unwrap();
            for k in 0..2 {
                let mut up = x.clone();
                up[k] += 1e-5;
                let mut dn = x.clone();
                dn[k] -= 1e-5;
                let fd = (posterior_predict(&m, &up).unwrap().0 - posterior_predict(&m, &dn).unwrap().0) / 2e-5;
                prop_assert!((g[k] - fd).abs() <= 1e-3 * fd.abs().max(1e-4), "{} vs {}", g[k], fd);
            }
        }
    }
}
