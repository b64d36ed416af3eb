use mfabo_cli::config::{apply_override, load, parse_seed_range};
use mfabo_cli::results::{parse_stem, pending_columns};
use mfabo_cli::summarize::{bin_edges, bin_of, quantile, quartiles};
use proptest::prelude::*;

#[test]
fn quantiles_of_small_samples() {
    assert_eq!(quantile(&[2.0], 0.25), 2.0);
    assert_eq!(quantile(&[1.0, 3.0], 0.5), 2.0);
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    assert_eq!(quartiles([None, Some(4.0), Some(0.0)].into_iter()), Some((1.0, 2.0, 3.0)));
    assert_eq!(quartiles([None, None].into_iter()), None);
}

#[test]
fn seed_ranges() {
    assert_eq!(parse_seed_range("0..9").unwrap(), (0..=9).collect::<Vec<_>>());
    assert_eq!(parse_seed_range("3..=4").unwrap(), vec![3, 4]);
    assert_eq!(parse_seed_range("7").unwrap(), vec![7]);
    assert!(parse_seed_range("9..1").is_err());
    assert!(parse_seed_range("a..b").is_err());
}

#[test]
fn overrides_parse_toml_values_and_bare_words() {
    let mut t = toml::Table::new();
    apply_override(&mut t, "run.benchmark=Park4D").unwrap();
    apply_override(&mut t, "run.horizon = 40").unwrap();
    apply_override(&mut t, "batch.delays=[1, 2.5]").unwrap();
    assert_eq!(t["run"]["benchmark"].as_str(), Some("Park4D"));
    assert_eq!(t["run"]["horizon"].as_integer(), Some(40));
    assert_eq!(t["batch"]["delays"].as_array().unwrap().len(), 2);
    assert!(apply_override(&mut t, "run.horizon.x=1").is_err());
    assert!(apply_override(&mut t, "=1").is_err());

    let (_, cfg) = load("[run]\nbenchmark = \"Currin2D\"\nstrategy = \"UCB\"\n", &["run.seeds=\"2..4\"".into()]).unwrap();
    assert_eq!(cfg.seeds().unwrap(), vec![2, 3, 4]);
    assert!(load("[run]\nbenchmark = \"Currin2D\"\n", &[]).is_err());
    assert!(load("[run]\nbenchmark = \"Currin2D\"\nstrategy = \"UCB\"\n[extra]\n", &[]).is_err());
}

#[test]
fn file_names_and_columns() {
    assert_eq!(parse_stem("Currin2D__MF-GP-UCB+LP__seed12.csv"), Some(("Currin2D".into(), "MF-GP-UCB+LP".into(), 12)));
    assert_eq!(parse_stem("Currin2D__UCB__seed1.queries.csv"), None);
    assert_eq!(parse_stem("manifest.toml"), None);
    assert_eq!(pending_columns(2), vec!["pending_low", "pending_high"]);
    assert_eq!(pending_columns(3), vec!["pending_low", "pending_f2", "pending_high"]);
}

proptest! {
    #[test]
    fn bins_partition_the_horizon(horizon in 1u64..2000, bins in 1usize..50, t in 0u64..2000) {
        let e = bin_edges(horizon, bins);
        prop_assert_eq!(e[0], 0);
        prop_assert_eq!(*e.last().unwrap(), horizon);
        prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
        let t = t.min(horizon);
        let i = bin_of(&e, t);
        prop_assert!(i + 1 < e.len());
        prop_assert!(t <= e[i + 1] && (t > e[i] || i == 0));
    }

    #[test]
    fn quartiles_are_ordered(v in proptest::collection::vec(-1e6..1e6f64, 1..40)) {
        let (a, b, c) = quartiles(v.iter().map(|x| Some(*x))).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= a && a <= b && b <= c && c <= hi);
    }
}

#[test]
fn plan_lists_each_divergence_once() {
    let text = "[run]\nbenchmark = \"Park4D\"\nstrategy = [\"UCB\", \"UCB-V-LP\", \"MF-MES\"]\n[batch]\nbudget = 8.0\nnoise = [0.01, 0.01]\n";
    let (_, cfg) = load(text, &[]).unwrap();
    let plan = cfg.plan().unwrap();
    assert_eq!(plan.engines.len(), 3);
    assert!(plan.engines.iter().all(|e| e.budget == 8.0 && e.fidelities.iter().all(|f| f.noise == 0.01)));
    let mut sorted = plan.divergences.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), plan.divergences.len());
    assert_eq!(plan.divergences.iter().filter(|d| d.contains("budget")).count(), 1);
    assert!(plan.divergences.iter().any(|d| d.contains("random queries")));
}
