//! Result files: one trace CSV and one query log per (strategy, seed), plus a run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfabo::engine::{EventKind, RunRecord};
use serde::Serialize;

/// `pending_low, pending_f2, ..., pending_high` for `m` fidelities.
pub fn pending_columns(m: usize) -> Vec<String> {
    (1..=m)
        .map(|k| match k {
            1 => "pending_low".to_string(),
            k if k == m => "pending_high".to_string(),
            k => format!("pending_f{k}"),
        })
        .collect()
}

pub fn trace_header(m: usize) -> String {
    let mut cols = vec!["sim_time", "best_hf", "regret", "occupied_space"].into_iter().map(String::from).collect::<Vec<_>>();
    cols.extend(pending_columns(m));
    cols.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_csv(rec: &RunRecord, m: usize) -> String {
    let mut s = trace_header(m);
    s.push('\n');
    for r in &rec.rows {
        let pending: Vec<String> = r.pending.iter().map(usize::to_string).collect();
        writeln!(s, "{},{},{},{},{}", r.time, opt(r.best_hf), opt(r.regret), r.occupied, pending.join(",")).unwrap();
    }
    s
}

pub const QUERY_HEADER: &str = "sim_time,query_id,fidelity,arrival,value,x";

/// Submitted queries, one row each; `x` is `;`-separated and `value` is empty until observed.
pub fn query_csv(rec: &RunRecord) -> String {
    let mut s = format!("{QUERY_HEADER}\n");
    for e in rec.submissions() {
        let value = rec.events.iter().find(|a| a.kind == EventKind::Arrive && a.id == e.id).and_then(|a| a.value);
        let x: Vec<String> = e.x.iter().map(f64::to_string).collect();
        writeln!(s, "{},{},{},{},{},{}", e.time, e.id, e.fidelity, e.arrival, opt(value), x.join(";")).unwrap();
    }
    s
}

pub fn file_stem(benchmark: &str, strategy: &str, seed: u64) -> String {
    format!("{benchmark}__{strategy}__seed{seed}")
}

/// `(benchmark, strategy, seed)` from a trace file name.
pub fn parse_stem(name: &str) -> Option<(String, String, u64)> {
    let stem = name.strip_suffix(".csv")?;
    let mut parts = stem.split("__");
    let (b, s, seed) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    Some((b.to_string(), s.to_string(), seed.strip_prefix("seed")?.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sim_time: u64,
    pub best_hf: Option<f64>,
    pub regret: Option<f64>,
    pub occupied_space: f64,
    pub pending: Vec<usize>,
}

fn field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, String> {
    s.parse().map_err(|_| format!("line {line}: bad {what} {s:?}"))
}

fn opt_field(s: &str, what: &str, line: usize) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(s, what, line).map(Some)
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[..4] != ["sim_time", "best_hf", "regret", "occupied_space"] || header != trace_header(cols.len() - 4) {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut rows: Vec<TraceRow> = Vec::new();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != cols.len() {
            return Err(format!("line {line}: {} fields, expected {}", f.len(), cols.len()));
        }
        let row = TraceRow {
            sim_time: field(f[0], "sim_time", line)?,
            best_hf: opt_field(f[1], "best_hf", line)?,
            regret: opt_field(f[2], "regret", line)?,
            occupied_space: field(f[3], "occupied_space", line)?,
            pending: f[4..].iter().map(|v| field(v, "pending count", line)).collect::<Result<_, _>>()?,
        };
        if rows.last().is_some_and(|p| p.sim_time >= row.sim_time) {
            return Err(format!("line {line}: sim_time not increasing"));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `(sim_time, fidelity)` of every submitted query.
pub fn parse_queries(text: &str) -> Result<Vec<(u64, usize)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(QUERY_HEADER) {
        return Err("unexpected query log header".into());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("line {}: expected 6 fields", i + 2));
            }
            Ok((field(f[0], "sim_time", i + 2)?, field(f[2], "fidelity", i + 2)?))
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct RunEntry {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub trace: String,
    pub queries: String,
    pub status: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: String,
    pub benchmark: String,
    pub seeds: Vec<u64>,
    pub divergences: Vec<String>,
    pub runs: Vec<RunEntry>,
    pub config: toml::Table,
}

/// Writes both files of a run; returns the manifest entry.
pub fn write_run(dir: &Path, rec: &RunRecord, m: usize, status: &str) -> std::io::Result<RunEntry> {
    let stem = file_stem(&rec.benchmark, rec.strategy.name(), rec.seed);
    let trace = format!("{stem}.csv");
    let queries = format!("{stem}.queries.csv");
    fs::write(dir.join(&trace), trace_csv(rec, m))?;
    fs::write(dir.join(&queries), query_csv(rec))?;
    Ok(RunEntry {
        strategy: rec.strategy.name().to_string(),
        seed: rec.seed,
        config_hash: rec.config_hash.clone(),
        trace,
        queries,
        status: status.to_string(),
        notes: rec.notes.clone(),
    })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.toml")
}
