use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfabo::benchmarks::make_preset;
use mfabo::engine::{run, EngineConfig, Strategy};
use mfabo_cli::results::{parse_queries, parse_stem, parse_trace, query_csv, trace_csv, trace_header};
use mfabo_cli::summarize::summarize;
use tempfile::TempDir;

fn mfabo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfabo")).args(args).env_remove("MFABO_OUT").output().unwrap()
}

fn quick(out: &Path, strategy: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--override",
        "run.benchmark=Currin2D",
        "--override",
        "run.horizon=12",
        "--override",
        "run.smoke=true",
        "--out",
        out.to_str().unwrap(),
    ];
    let strat = format!("run.strategy={strategy}");
    args.extend(["--override", strat.as_str()]);
    args.extend(extra);
    mfabo(&args)
}

fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ten_seeds_give_ten_traces_and_one_manifest() {
    let dir = TempDir::new().unwrap();
    let o = quick(dir.path(), "UCB-V-LP", &["--seeds", "0..9", "--jobs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = contents(dir.path());
    let traces: Vec<_> = files.keys().filter_map(|n| parse_stem(n)).collect();
    assert_eq!(traces.len(), 10);
    assert!(traces.iter().all(|(b, s, _)| b == "Currin2D" && s == "UCB-V-LP"));
    let seeds: Vec<u64> = traces.iter().map(|t| t.2).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    assert_eq!(seeds, (0..10).collect::<Vec<_>>());
    assert_eq!(files.keys().filter(|n| n.ends_with(".toml")).count(), 1);

    let manifest: toml::Table = String::from_utf8(files["manifest.toml"].clone()).unwrap().parse().unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["version"].as_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let divergences: Vec<&str> = manifest["divergences"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for d in make_preset("Currin2D").unwrap().divergences {
        assert!(divergences.contains(&d.as_str()));
    }
    assert!(divergences.iter().any(|d| d.contains("smoke")));
    assert_eq!(manifest["config"]["run"]["benchmark"].as_str(), Some("Currin2D"));
}

#[test]
fn reruns_are_byte_identical_regardless_of_jobs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let args = ["--seeds", "0..2", "--override", "run.strategy=[\"UCB\", \"MF-MES\"]"];
    assert!(quick(a.path(), "UCB", &[&args[..], &["--jobs", "1"]].concat()).status.success());
    assert!(quick(b.path(), "UCB", &[&args[..], &["--jobs", "4"]].concat()).status.success());
    let (ca, cb) = (contents(a.path()), contents(b.path()));
    assert_eq!(ca.len(), 13);
    assert_eq!(ca, cb);
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = quick(dir.path(), "UCB-X", &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for s in Strategy::ALL {
        assert!(msg.contains(s.name()), "{msg}");
    }
    assert!(contents(dir.path()).is_empty());
}

#[test]
fn invalid_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let cases: [&[&str]; 9] = [
        &["--override", "run.model=lmc"],
        &["--override", "batch.delays=[1.0]"],
        &["--override", "batch.budget=0.5"],
        &["--override", "acquisition.fantasies=0"],
        &["--override", "model.train_learning_rate=-1"],
        &["--override", "run.colour=blue"],
        &["--override", "no-equals-sign"],
        &["--seeds", "5..2"],
        &["--jobs", "0"],
    ];
    for extra in cases {
        let o = quick(dir.path(), "MF-GP-UCB", extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    let missing = mfabo(&["run", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_flag = mfabo(&["run", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    // the model must match the strategy
    assert!(quick(dir.path(), "MF-GP-UCB", &["--override", "run.model=independent"]).status.success());
}

#[test]
fn runtime_failure_exits_1_and_keeps_partial_output() {
    let dir = TempDir::new().unwrap();
    let o = quick(dir.path(), "UCB-V-LP", &["--override", "model.train_learning_rate=1e300", "--override", "run.horizon=40"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let files = contents(dir.path());
    let trace = String::from_utf8(files["Currin2D__UCB-V-LP__seed0.csv"].clone()).unwrap();
    let rows = parse_trace(&trace).unwrap();
    assert!(!rows.is_empty() && rows.len() < 40);
    let manifest = String::from_utf8(files["manifest.toml"].clone()).unwrap();
    assert!(manifest.contains("status = \"failed:"), "{manifest}");
}

#[test]
fn config_file_overrides_and_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[run]\nbenchmark = \"Hartmann3D\"\nstrategy = \"UCB-I-LP\"\nseeds = [3, 5]\nhorizon = 8\nsmoke = true\nout = \"ignored\"\n\n[batch]\ndelays = [1.0, 2.0, 4.0]\ndelay_distribution = \"exponential\"\n",
    )
    .unwrap();
    let env_out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_mfabo"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--override", "run.horizon=10"])
        .env("MFABO_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let files = contents(&env_out);
    assert!(files.contains_key("Hartmann3D__UCB-I-LP__seed3.csv"));
    assert!(files.contains_key("Hartmann3D__UCB-I-LP__seed5.csv"));
    let rows = parse_trace(std::str::from_utf8(&files["Hartmann3D__UCB-I-LP__seed5.csv"]).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0].pending.len(), 3);
    let manifest = std::str::from_utf8(&files["manifest.toml"]).unwrap();
    assert!(manifest.contains("exponential delays"), "{manifest}");

    // --out beats MFABO_OUT, --seed beats the config
    let flag_out = dir.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_mfabo"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", flag_out.to_str().unwrap()])
        .env("MFABO_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = contents(&flag_out).into_keys().filter(|n| parse_stem(n).is_some()).collect();
    assert_eq!(names, vec!["Hartmann3D__UCB-I-LP__seed7.csv".to_string()]);
}

#[test]
fn traces_round_trip_losslessly() {
    let p = make_preset("Hartmann3D").unwrap();
    let mut cfg = EngineConfig::for_preset(&p, Strategy::UcbVLp).smoke();
    cfg.horizon = 25;
    let rec = run(&p, &cfg, 4).unwrap();
    let text = trace_csv(&rec, 3);
    assert!(text.starts_with("sim_time,best_hf,regret,occupied_space,pending_low,pending_f2,pending_high\n"));
    let rows = parse_trace(&text).unwrap();
    assert_eq!(rows.len(), rec.rows.len());
    for (a, b) in rows.iter().zip(&rec.rows) {
        assert_eq!((a.sim_time, a.best_hf, a.regret, a.occupied_space), (b.time, b.best_hf, b.regret, b.occupied));
        assert_eq!(a.pending, b.pending);
    }
    assert!(rows.windows(2).all(|w| w[0].sim_time < w[1].sim_time));
    assert!(rows.iter().any(|r| r.regret.is_none()) && rows.iter().any(|r| r.regret.is_some()));
    let queries = parse_queries(&query_csv(&rec)).unwrap();
    let subs: Vec<(u64, usize)> = rec.submissions().map(|e| (e.time, e.fidelity)).collect();
    assert_eq!(queries, subs);
}

fn write_trace(dir: &Path, name: &str, rows: &[(u64, Option<f64>)]) {
    let mut s = trace_header(2) + "\n";
    for (t, r) in rows {
        let r = r.map(|v| v.to_string()).unwrap_or_default();
        s += &format!("{t},1.5,{r},4,2,2\n");
    }
    fs::write(dir.join(name), s).unwrap();
}

fn regret_rows(csv: &str, strategy: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect::<Vec<_>>()).filter(|f| f[1] == strategy).collect()
}

#[test]
fn single_seed_median_is_the_trace() {
    let dir = TempDir::new().unwrap();
    let trace = [(1, None), (2, Some(0.75)), (3, Some(0.125))];
    write_trace(dir.path(), "Currin2D__UCB__seed0.csv", &trace);
    let s = summarize(dir.path(), 3).unwrap();
    let rows = regret_rows(&s.regret_csv, "UCB");
    assert_eq!(rows.len(), 3);
    for (row, (t, r)) in rows.iter().zip(trace) {
        assert_eq!(row[2], t.to_string());
        let want = r.map(|v| v.to_string()).unwrap_or_default();
        assert_eq!((&row[4], &row[5], &row[6]), (&want, &want, &want));
    }
}

#[test]
fn two_seed_median_is_the_midpoint() {
    let dir = TempDir::new().unwrap();
    let a = [0.9, 0.5, 0.25, 0.1];
    let b = [0.3, 0.4, 0.05, 0.0];
    write_trace(dir.path(), "Park4D__UCB-V-LP__seed0.csv", &a.iter().enumerate().map(|(i, v)| (i as u64 + 1, Some(*v))).collect::<Vec<_>>());
    write_trace(dir.path(), "Park4D__UCB-V-LP__seed1.csv", &b.iter().enumerate().map(|(i, v)| (i as u64 + 1, Some(*v))).collect::<Vec<_>>());
    let s = summarize(dir.path(), 2).unwrap();
    for (row, (x, y)) in regret_rows(&s.regret_csv, "UCB-V-LP").iter().zip(a.iter().zip(&b)) {
        assert_eq!(row[3], "2");
        let median: f64 = row[5].parse().unwrap();
        assert!((median - 0.5 * (x + y)).abs() < 1e-15);
        let (q25, q75): (f64, f64) = (row[4].parse().unwrap(), row[6].parse().unwrap());
        assert!(q25 <= median && median <= q75);
    }
}

#[test]
fn histogram_partitions_time_and_conserves_queries() {
    let dir = TempDir::new().unwrap();
    assert!(quick(dir.path(), "UCB-V-LP", &["--seeds", "0..1", "--override", "run.horizon=17"]).status.success());
    let before = contents(dir.path());
    for bins in [1, 4, 5, 17, 40] {
        let s = summarize(dir.path(), bins).unwrap();
        let rows: Vec<Vec<String>> = s.histogram_csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        let mut edges: Vec<(u64, u64)> = rows.iter().map(|r| (r[2].parse().unwrap(), r[3].parse().unwrap())).collect();
        edges.dedup();
        assert_eq!(edges.first().unwrap().0, 0);
        assert_eq!(edges.last().unwrap().1, 17);
        assert!(edges.windows(2).all(|w| w[0].1 == w[1].0 && w[0].0 < w[0].1));
        let total: usize = rows.iter().map(|r| r[5].parse::<usize>().unwrap()).sum();
        let queries: usize = (0..2)
            .map(|seed| {
                let q = fs::read_to_string(dir.path().join(format!("Currin2D__UCB-V-LP__seed{seed}.queries.csv"))).unwrap();
                parse_queries(&q).unwrap().len()
            })
            .sum();
        assert_eq!(total, queries);
    }
    assert_eq!(contents(dir.path()), before);
}

#[test]
fn summarize_command_writes_outside_the_inputs() {
    let dir = TempDir::new().unwrap();
    assert!(quick(dir.path(), "UCB", &[]).status.success());
    let before = contents(dir.path());
    let o = mfabo(&["summarize", dir.path().to_str().unwrap(), "--bins", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("UCB"));
    assert_eq!(contents(dir.path()), before);
    let summary = contents(&dir.path().join("summary"));
    assert!(summary.contains_key("regret.csv") && summary.contains_key("fidelity_histogram.csv"));
    // a second pass ignores the summary directory
    assert!(mfabo(&["summarize", dir.path().to_str().unwrap()]).status.success());
}

#[test]
fn summarize_rejects_empty_or_missing_directories() {
    let dir = TempDir::new().unwrap();
    assert_eq!(mfabo(&["summarize", dir.path().to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(mfabo(&["summarize", dir.path().join("missing").to_str().unwrap()]).status.code(), Some(2));
    fs::write(dir.path().join("Currin2D__UCB__seed0.csv"), "garbage\n").unwrap();
    assert_ne!(mfabo(&["summarize", dir.path().to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn listings_name_every_preset_and_strategy() {
    let b = String::from_utf8(mfabo(&["list-benchmarks"]).stdout).unwrap();
    for name in mfabo::benchmarks::PRESET_NAMES {
        assert!(b.contains(name));
    }
    let s = String::from_utf8(mfabo(&["list-strategies"]).stdout).unwrap();
    for st in Strategy::ALL {
        assert!(s.lines().any(|l| l.split_whitespace().next() == Some(st.name())));
    }
}
