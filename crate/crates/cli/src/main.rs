use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use mfabo::benchmarks::{make_preset, PRESET_NAMES};
use mfabo::engine::{run, Strategy};
use mfabo_cli::config::{self, model_name, ConfigError};
use mfabo_cli::results::{manifest_path, write_run, Manifest, RunEntry};
use mfabo_cli::summarize::summarize;

#[derive(Parser)]
#[command(name = "mfabo", version, about = "Asynchronous multi-fidelity batch Bayesian optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more strategies over a range of seeds.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `section.key=value`, applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Inclusive range `A..B`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory; otherwise `MFABO_OUT`, then `run.out`, then `results`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median and quartile regret per strategy, and fidelity-query histograms.
    Summarize {
        dir: PathBuf,
        /// Where to write the summary files (default `<dir>/summary`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    ListBenchmarks,
    ListStrategies,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, overrides, seed, seeds, jobs, out } => run_command(config, &overrides, seed, seeds, jobs, out),
        Command::Summarize { dir, out, bins } => summarize_command(&dir, out, bins),
        Command::ListBenchmarks => {
            println!("{:<18} {:>4} {:>10} {:>7} {:>6} {:>8}  optimum", "name", "dim", "fidelities", "budget", "batch", "horizon");
            for name in PRESET_NAMES {
                let p = make_preset(name).expect("preset");
                let opt = p.optimum.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
                println!("{name:<18} {:>4} {:>10} {:>7} {:>6} {:>8}  {opt}", p.dim, p.num_fidelities(), p.budget, p.batch_size, p.horizon);
            }
            ExitCode::SUCCESS
        }
        Command::ListStrategies => {
            println!("{:<14} {:<12} {:<12} batching", "name", "model", "fidelity");
            for s in Strategy::ALL {
                println!("{:<14} {:<12} {:<12} {:?}", s.name(), model_name(s.model()), format!("{:?}", s.fidelity_rule()), s.batching());
            }
            ExitCode::SUCCESS
        }
    }
}

fn usage(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

/// Task index, manifest entry, and the failure message if the run failed.
type Finished = (usize, std::io::Result<RunEntry>, Option<String>);

fn run_command(
    config: Option<PathBuf>,
    overrides: &[String],
    seed: Option<u64>,
    seeds: Option<String>,
    jobs: usize,
    out: Option<PathBuf>,
) -> ExitCode {
    let text = match &config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => return usage(format!("{}: {e}", p.display())),
        },
        None => String::new(),
    };
    let plan = (|| -> Result<_, ConfigError> {
        let (table, cfg) = config::load(&text, overrides)?;
        let mut plan = cfg.plan()?;
        if let Some(s) = seed {
            plan.seeds = vec![s];
        } else if let Some(r) = &seeds {
            plan.seeds = config::parse_seed_range(r)?;
        }
        if let Some(o) = out.or_else(|| std::env::var_os("MFABO_OUT").map(PathBuf::from)) {
            plan.out = o;
        }
        for e in &plan.engines {
            e.validate(&plan.preset).map_err(|err| ConfigError(format!("{}: {err}", e.strategy)))?;
        }
        if jobs == 0 {
            return Err(ConfigError("--jobs must be at least 1".into()));
        }
        Ok((table, plan))
    })();
    let (table, plan) = match plan {
        Ok(p) => p,
        Err(e) => return usage(e),
    };
    if let Err(e) = std::fs::create_dir_all(&plan.out) {
        eprintln!("error: {}: {e}", plan.out.display());
        return ExitCode::from(1);
    }

    let tasks: Vec<(usize, u64)> = (0..plan.engines.len()).flat_map(|i| plan.seeds.iter().map(move |&s| (i, s))).collect();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Finished>> = Mutex::new(Vec::new());
    let m = plan.preset.num_fidelities();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, s)) = tasks.get(k) else { break };
                let (entry, failure) = match run(&plan.preset, &plan.engines[i], s) {
                    Ok(rec) => (write_run(&plan.out, &rec, m, "ok"), None),
                    Err(f) => (write_run(&plan.out, &f.partial, m, &format!("failed: {}", f.error)), Some(f.to_string())),
                };
                eprintln!("{} seed {s}: {}", plan.engines[i].strategy, failure.as_deref().unwrap_or("done"));
                done.lock().unwrap().push((k, entry, failure));
            });
        }
    });
    let mut done = done.into_inner().unwrap();
    done.sort_by_key(|d| d.0);

    let mut failed = false;
    let mut runs = Vec::new();
    for (_, entry, failure) in done {
        failed |= failure.is_some();
        match entry {
            Ok(e) => runs.push(e),
            Err(e) => {
                eprintln!("error: writing results: {e}");
                failed = true;
            }
        }
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        benchmark: plan.preset.name.clone(),
        seeds: plan.seeds.clone(),
        divergences: plan.divergences.clone(),
        runs,
        config: table,
    };
    let written = toml::to_string(&manifest)
        .map_err(|e| e.to_string())
        .and_then(|t| std::fs::write(manifest_path(&plan.out), t).map_err(|e| e.to_string()));
    if let Err(e) = written {
        eprintln!("error: writing manifest: {e}");
        failed = true;
    }
    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn summarize_command(dir: &Path, out: Option<PathBuf>, bins: usize) -> ExitCode {
    if !dir.is_dir() {
        return usage(format!("{} is not a directory", dir.display()));
    }
    let s = match summarize(dir, bins) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    let out = out.unwrap_or_else(|| dir.join("summary"));
    let written = std::fs::create_dir_all(&out)
        .and_then(|_| std::fs::write(out.join("regret.csv"), &s.regret_csv))
        .and_then(|_| std::fs::write(out.join("fidelity_histogram.csv"), &s.histogram_csv));
    if let Err(e) = written {
        eprintln!("error: {}: {e}", out.display());
        return ExitCode::from(1);
    }
    print!("{}", s.table);
    ExitCode::SUCCESS
}
