//! Cross-seed summaries of a results directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::results::{file_stem, parse_queries, parse_stem, parse_trace, TraceRow};

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(q25, median, q75)` of the present values, or `None` if there are none.
pub fn quartiles(values: impl Iterator<Item = Option<f64>>) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some((quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75)))
}

/// Bin edges `e_0 = 0 < ... < e_n = horizon`; bin `i` holds times in `(e_i, e_{i+1}]`, the first also time 0.
pub fn bin_edges(horizon: u64, bins: usize) -> Vec<u64> {
    let bins = bins.clamp(1, horizon.max(1) as usize);
    let mut e: Vec<u64> = (0..=bins).map(|i| (horizon as u128 * i as u128 / bins as u128) as u64).collect();
    e.dedup();
    e
}

pub fn bin_of(edges: &[u64], t: u64) -> usize {
    edges[1..].iter().position(|&e| t <= e).unwrap_or(edges.len() - 2)
}

#[derive(Default)]
struct Group {
    traces: Vec<(u64, Vec<TraceRow>)>,
    queries: Vec<Vec<(u64, usize)>>,
}

pub struct Summary {
    pub regret_csv: String,
    pub histogram_csv: String,
    pub table: String,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads every trace in `dir` (and its query log) without modifying anything.
pub fn summarize(dir: &Path, bins: usize) -> Result<Summary, String> {
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for entry in entries {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some((bench, strategy, seed)) = parse_stem(&name) else { continue };
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
        let rows = parse_trace(&read(&entry.path())?).map_err(|e| format!("{name}: {e}"))?;
        let qname = format!("{}.queries.csv", file_stem(&bench, &strategy, seed));
        let qpath = dir.join(&qname);
        let g = groups.entry((bench, strategy)).or_default();
        g.traces.push((seed, rows));
        if qpath.exists() {
            g.queries.push(parse_queries(&read(&qpath)?).map_err(|e| format!("{qname}: {e}"))?);
        }
    }
    if groups.is_empty() {
        return Err(format!("no result files in {}", dir.display()));
    }

    let mut regret = String::from("benchmark,strategy,sim_time,seeds,regret_q25,regret_median,regret_q75,best_q25,best_median,best_q75\n");
    let mut hist = String::from("benchmark,strategy,bin_start,bin_end,fidelity,count\n");
    let mut table = format!("{:<18} {:<14} {:>5} {:>8} {:>12} {:>12} {:>12}\n", "benchmark", "strategy", "seeds", "time", "regret_q25", "regret_med", "regret_q75");
    for ((bench, strategy), g) in &mut groups {
        g.traces.sort_by_key(|(s, _)| *s);
        let mut times: Vec<u64> = g.traces.iter().flat_map(|(_, r)| r.iter().map(|x| x.sim_time)).collect();
        times.sort_unstable();
        times.dedup();
        let at = |rows: &[TraceRow], t: u64| rows.binary_search_by_key(&t, |r| r.sim_time).ok().map(|i| rows[i].clone());
        let mut last = None;
        for &t in &times {
            let rows: Vec<TraceRow> = g.traces.iter().filter_map(|(_, r)| at(r, t)).collect();
            let r = quartiles(rows.iter().map(|x| x.regret));
            let b = quartiles(rows.iter().map(|x| x.best_hf));
            writeln!(
                regret,
                "{bench},{strategy},{t},{},{},{},{},{},{},{}",
                rows.len(),
                cell(r.map(|q| q.0)),
                cell(r.map(|q| q.1)),
                cell(r.map(|q| q.2)),
                cell(b.map(|q| q.0)),
                cell(b.map(|q| q.1)),
                cell(b.map(|q| q.2)),
            )
            .unwrap();
            last = Some((t, rows.len(), r));
        }
        if let Some((t, n, r)) = last {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into());
            writeln!(table, "{bench:<18} {strategy:<14} {n:>5} {t:>8} {:>12} {:>12} {:>12}", f(r.map(|q| q.0)), f(r.map(|q| q.1)), f(r.map(|q| q.2))).unwrap();
        }

        let horizon = times.last().copied().unwrap_or(0);
        let m = g.traces.iter().flat_map(|(_, r)| r.first().map(|x| x.pending.len())).max().unwrap_or(1);
        let edges = bin_edges(horizon, bins);
        let mut counts = vec![vec![0usize; m]; edges.len() - 1];
        for q in &g.queries {
            for &(t, fid) in q {
                if (1..=m).contains(&fid) {
                    counts[bin_of(&edges, t)][fid - 1] += 1;
                }
            }
        }
        for (i, c) in counts.iter().enumerate() {
            for (k, n) in c.iter().enumerate() {
                writeln!(hist, "{bench},{strategy},{},{},{},{n}", edges[i], edges[i + 1], k + 1).unwrap();
            }
        }
    }
    Ok(Summary { regret_csv: regret, histogram_csv: hist, table })
}
