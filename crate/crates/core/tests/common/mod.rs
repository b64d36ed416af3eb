//! A plain sequential UCB loop, written without the engine, used as a reference trace.

use mfabo::acquisition::{refine_from_screen, ucb_value, OptimizerConfig, Ucb};
use mfabo::benchmarks::BenchmarkPreset;
use mfabo::engine::{Delay, EngineConfig, Strategy};
use mfabo::mf_model::{fit_surrogate, FidelityDataset, ModelVariant, Surrogate, SurrogateConfig};
use mfabo::rng::{self, purpose};
use mfabo::train::TrainConfig;
use mfabo::Point;

/// UCB with zero delays and room for one query at a time.
pub fn sequential_config(preset: &BenchmarkPreset, horizon: u64) -> EngineConfig {
    let mut cfg = EngineConfig::for_preset(preset, Strategy::Ucb);
    cfg.horizon = horizon;
    cfg.budget = 1.0;
    cfg.batch_size = 1;
    for f in cfg.fidelities.iter_mut() {
        f.delay = Delay::Fixed(0.0);
        f.space = 1.0;
    }
    cfg
}

/// One query per step: observe the previous query, update the model, maximize UCB.
pub fn sequential_ucb(preset: &BenchmarkPreset, cfg: &EngineConfig, seed: u64) -> Vec<(Point, usize)> {
    let top = preset.num_fidelities();
    let dim = preset.dim;
    let initial = (5 * dim).div_ceil(cfg.batch_size) as u64;
    let screen_size = (7500 * dim).min(cfg.screen_cap);
    let mut data = FidelityDataset::new(top);
    let mut model: Option<Surrogate> = None;
    let mut since_fit = 0;
    let mut fits = 0u64;
    let mut out: Vec<(Point, usize)> = Vec::new();
    for t in 1..=cfg.horizon {
        if let Some((x, m)) = out.last() {
            data.push(x.clone(), *m, preset.evaluate(x, *m).unwrap());
            since_fit += 1;
            if model.is_none() || since_fit >= cfg.refit_every {
                let mut sc = SurrogateConfig::new(ModelVariant::SingleTask);
                sc.train = TrainConfig { seed: rng::derive_seed(seed, &[purpose::TRAIN_SUBSET, fits]), ..cfg.train.clone() };
                fits += 1;
                model = Some(fit_surrogate(&data, &sc, model.as_ref()).unwrap());
                since_fit = 0;
            } else {
                let y = *data.targets[m - 1].last().unwrap();
                model = Some(model.unwrap().with_observations(&[(x.clone(), *m, y)]).unwrap());
            }
        }
        let x = match &model {
            Some(s) if t > initial => {
                let beta = cfg.beta.beta(t as usize, dim);
                let screen =
                    rng::uniform_points(&mut rng::stream(rng::derive_seed(seed, &[purpose::SCREEN, t, 0])), dim, screen_size);
                let (mu, var) = s.predict_many(&screen, top).unwrap();
                let values: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| ucb_value(*m, *v, beta)).collect();
                let obj = Ucb { surrogate: s, fidelity: top, beta };
                let opt = OptimizerConfig {
                    screen_size,
                    starts: cfg.starts,
                    learning_rate: cfg.acq_learning_rate,
                    epochs: cfg.acq_epochs,
                };
                refine_from_screen(&obj, &screen, &values, &opt).unwrap().point
            }
            _ => preset
                .domain
                .random_point(&mut rng::stream(rng::derive_seed(seed, &[purpose::INITIAL_DESIGN, t, 0]))),
        };
        out.push((x, top));
    }
    out
}
