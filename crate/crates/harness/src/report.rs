//! Aggregation of metrics CSVs into summary tables and plot-ready rows.
//! Everything here is a pure function of the input rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::metrics::{MetricsRow, METRICS_FILE};
use crate::stats::{mean, sample_std};

/// Command name encoded at the front of a run id (`<command>-s<seed>-<hash>`).
pub fn command_of(run_id: &str) -> &str {
    match run_id.rfind("-s") {
        Some(i) => &run_id[..i],
        None => run_id,
    }
}

/// Plot-ready long-format row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub tags: String,
}

/// Final value of a metric, aggregated over runs (seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub command: String,
    pub metric: String,
    pub tags: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn long_rows(rows: &[MetricsRow]) -> Vec<LongRow> {
    rows.iter()
        .map(|r| LongRow {
            command: command_of(&r.run_id).into(),
            run_id: r.run_id.clone(),
            seed: r.seed,
            step: r.step,
            metric: r.metric.clone(),
            value: r.value,
            tags: r.tags.clone(),
        })
        .collect()
}

/// Per `(run, metric, tags)` the value at the largest step (last written on
/// ties), then mean / std / range over runs per `(command, metric, tags)`.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut last: BTreeMap<(&str, &str, &str), (u64, f64)> = BTreeMap::new();
    for r in rows {
        let e = last.entry((r.run_id.as_str(), r.metric.as_str(), r.tags.as_str())).or_insert((r.step, r.value));
        if r.step >= e.0 {
            *e = (r.step, r.value);
        }
    }
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for ((run, metric, tags), (_, v)) in last {
        groups.entry((command_of(run).into(), metric.into(), tags.into())).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|((command, metric, tags), vals)| SummaryRow {
            command,
            metric,
            tags,
            n: vals.len(),
            mean: mean(&vals),
            std: sample_std(&vals),
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// Every metrics file under `roots`, sorted, skipping `exclude`.
pub fn find_metrics(roots: &[PathBuf], exclude: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack: Vec<PathBuf> = roots.to_vec();
    while let Some(p) = stack.pop() {
        if exclude.is_some_and(|e| p.starts_with(e)) {
            continue;
        }
        if p.is_dir() {
            for entry in std::fs::read_dir(&p).map_err(io_err(&p))? {
                stack.push(entry.map_err(io_err(&p))?.path());
            }
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
