//! Run configuration: a TOML file, `section.key=value` overrides, and validation into engine configs.

use std::path::PathBuf;

use mfabo::acquisition::BetaSchedule;
use mfabo::benchmarks::{make_preset_with, BenchmarkPreset};
use mfabo::engine::{Delay, EngineConfig, Strategy};
use mfabo::mf_model::ModelVariant;
use serde::Deserialize;
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Range(String),
    List(Vec<u64>),
    One(u64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub benchmark: String,
    pub strategy: OneOrMany,
    pub model: Option<String>,
    pub seeds: Option<SeedSpec>,
    pub horizon: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub smoke: bool,
    #[serde(default)]
    pub objective_seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub budget: Option<f64>,
    pub batch_size: Option<usize>,
    pub spaces: Option<Vec<f64>>,
    pub delays: Option<Vec<f64>>,
    /// `fixed`, `uniform` (mean ± spread·mean) or `exponential`.
    pub delay_distribution: Option<String>,
    pub delay_spread: Option<f64>,
    pub costs: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub refit_every: Option<usize>,
    pub train_epochs: Option<usize>,
    pub train_learning_rate: Option<f64>,
    pub train_max_points: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSection {
    pub beta: Option<f64>,
    pub beta_delta: Option<f64>,
    pub gamma: Option<f64>,
    pub doubling: Option<bool>,
    pub screen_size: Option<usize>,
    pub screen_cap: Option<usize>,
    pub starts: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub fantasies: Option<usize>,
    pub max_value_samples: Option<usize>,
    pub max_value_grid: Option<usize>,
    pub lipschitz_points: Option<usize>,
    pub local_lipschitz: Option<bool>,
    pub trust_grid: Option<usize>,
    pub initial_steps: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub batch: BatchSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub acquisition: AcquisitionSection,
}

/// Parses `text`, applies `key=value` overrides (dotted keys, TOML values, bare words as strings).
pub fn load(text: &str, overrides: &[String]) -> Result<(Table, RunConfig), ConfigError> {
    let mut table: Table = text.parse().map_err(|e| ConfigError(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = Value::Table(table.clone()).try_into().map_err(|e| ConfigError(format!("config: {e}")))?;
    Ok((table, cfg))
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return err(format!("override {spec:?} is not key=value"));
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return err(format!("override {spec:?} has an empty key"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return err(format!("override {spec:?}: {p} is not a section")),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// `A..B` (inclusive), or a single number.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = || ConfigError(format!("seed range {s:?} is not A..B"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        Ok((a..=b).collect())
    } else {
        Ok(vec![s.trim().parse().map_err(|_| bad())?])
    }
}

pub fn model_name(m: ModelVariant) -> &'static str {
    match m {
        ModelVariant::SingleTask => "single",
        ModelVariant::IndependentGps => "independent",
        ModelVariant::MultiTaskLmc => "lmc",
    }
}

/// A validated configuration ready to run.
pub struct Plan {
    pub preset: BenchmarkPreset,
    pub engines: Vec<EngineConfig>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Settings that depart from the preset or from the reference protocol.
    pub divergences: Vec<String>,
}

impl RunConfig {
    pub fn strategies(&self) -> Result<Vec<Strategy>, ConfigError> {
        let names = match &self.run.strategy {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        };
        if names.is_empty() {
            return err("run.strategy is empty");
        }
        names.iter().map(|n| Strategy::parse(n).map_err(|e| ConfigError(e.to_string()))).collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>, ConfigError> {
        match &self.run.seeds {
            None => Ok(vec![0]),
            Some(SeedSpec::One(s)) => Ok(vec![*s]),
            Some(SeedSpec::List(v)) if v.is_empty() => err("run.seeds is empty"),
            Some(SeedSpec::List(v)) => Ok(v.clone()),
            Some(SeedSpec::Range(r)) => parse_seed_range(r),
        }
    }

    pub fn plan(&self) -> Result<Plan, ConfigError> {
        let preset = make_preset_with(&self.run.benchmark, self.run.objective_seed).map_err(|e| ConfigError(e.to_string()))?;
        let strategies = self.strategies()?;
        if let Some(model) = &self.run.model {
            for s in &strategies {
                let want = model_name(s.model());
                if !model.eq_ignore_ascii_case(want) {
                    return err(format!("{s} uses the {want} model, not {model:?}"));
                }
            }
        }
        let mut divergences = preset.divergences.clone();
        let mut engines = Vec::new();
        for s in strategies {
            let mut cfg = EngineConfig::for_preset(&preset, s);
            if self.run.smoke {
                cfg = cfg.smoke();
            }
            self.apply(&mut cfg, &preset, &mut divergences)?;
            engines.push(cfg);
        }
        if engines.iter().any(|c| matches!(c.strategy, Strategy::Ucb | Strategy::MfGpUcb)) {
            divergences.push("non-batching baselines fill the rest of each batch with uniform random queries".into());
        }
        if self.run.smoke {
            divergences.push("smoke settings: reduced screening, training and sampling budgets".into());
        }
        let mut seen = std::collections::HashSet::new();
        divergences.retain(|d| seen.insert(d.clone()));
        Ok(Plan { preset, engines, seeds: self.seeds()?, out: self.run.out.clone().unwrap_or_else(|| "results".into()), divergences })
    }

    fn apply(&self, cfg: &mut EngineConfig, preset: &BenchmarkPreset, notes: &mut Vec<String>) -> Result<(), ConfigError> {
        let m = preset.num_fidelities();
        let per_fidelity = |name: &str, v: &Option<Vec<f64>>| -> Result<Option<Vec<f64>>, ConfigError> {
            match v {
                Some(v) if v.len() != m => err(format!("batch.{name} needs {m} values, got {}", v.len())),
                other => Ok(other.clone()),
            }
        };
        let b = &self.batch;
        if let Some(h) = self.run.horizon {
            cfg.horizon = h;
        }
        if let Some(v) = b.budget {
            cfg.budget = v;
            notes.push(format!("budget set to {v}"));
        }
        if let Some(v) = b.batch_size {
            cfg.batch_size = v;
            notes.push(format!("batch size set to {v}"));
        }
        if let Some(v) = per_fidelity("spaces", &b.spaces)? {
            cfg.fidelities.iter_mut().zip(&v).for_each(|(f, x)| f.space = *x);
            notes.push(format!("batch spaces set to {v:?}"));
        }
        if let Some(v) = per_fidelity("costs", &b.costs)? {
            cfg.fidelities.iter_mut().zip(&v).for_each(|(f, x)| f.cost = *x);
            notes.push(format!("costs set to {v:?}"));
        }
        if let Some(v) = per_fidelity("noise", &b.noise)? {
            cfg.fidelities.iter_mut().zip(&v).for_each(|(f, x)| f.noise = *x);
            notes.push(format!("observation noise set to {v:?}"));
        }
        if let Some(v) = per_fidelity("bias", &b.bias)? {
            cfg.fidelities.iter_mut().zip(&v).for_each(|(f, x)| f.bias = *x);
            notes.push(format!("bias bounds set to {v:?}"));
        }
        let means = per_fidelity("delays", &b.delays)?;
        if means.is_some() || b.delay_distribution.is_some() {
            let means = means.unwrap_or_else(|| cfg.fidelities.iter().map(|f| f.delay.expected()).collect());
            let spread = b.delay_spread.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&spread) {
                return err("batch.delay_spread must lie in [0, 1]");
            }
            let kind = b.delay_distribution.as_deref().unwrap_or("fixed");
            for (f, &mu) in cfg.fidelities.iter_mut().zip(&means) {
                f.delay = match kind {
                    "fixed" => Delay::Fixed(mu),
                    "uniform" => Delay::Uniform { low: mu * (1.0 - spread), high: mu * (1.0 + spread) },
                    "exponential" => Delay::Exponential { mean: mu },
                    other => return err(format!("unknown delay distribution {other:?}; expected fixed, uniform or exponential")),
                };
            }
            notes.push(format!("{kind} delays with means {means:?}"));
        }
        let md = &self.model;
        if let Some(v) = md.refit_every {
            cfg.refit_every = v;
        }
        if let Some(v) = md.train_epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = md.train_learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = md.train_max_points {
            cfg.train.max_points = v;
        }
        let a = &self.acquisition;
        match (a.beta, a.beta_delta) {
            (Some(_), Some(_)) => return err("set acquisition.beta or acquisition.beta_delta, not both"),
            (Some(b), None) if b > 0.0 => cfg.beta = BetaSchedule::Fixed(b),
            (None, Some(d)) if d > 0.0 && d < 1.0 => cfg.beta = BetaSchedule::Logarithmic { delta: d },
            (None, None) => {}
            _ => return err("acquisition.beta must be positive and beta_delta in (0, 1)"),
        }
        if let Some(v) = a.gamma {
            cfg.gamma = v;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = a.$field { $target = v; })*
            };
        }
        set!(
            doubling => cfg.doubling,
            screen_cap => cfg.screen_cap,
            starts => cfg.starts,
            epochs => cfg.acq_epochs,
            learning_rate => cfg.acq_learning_rate,
            fantasies => cfg.fantasies,
            max_value_samples => cfg.max_value_samples,
            max_value_grid => cfg.max_value_grid,
            lipschitz_points => cfg.lipschitz.points_per_dim,
            local_lipschitz => cfg.local_lipschitz,
        );
        if a.screen_size.is_some() {
            cfg.screen_size = a.screen_size;
        }
        if a.trust_grid.is_some() {
            cfg.trust_grid = a.trust_grid;
        }
        if a.initial_steps.is_some() {
            cfg.initial_steps = a.initial_steps;
        }
        Ok(())
    }
}
