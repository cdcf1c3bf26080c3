//! Long-format metrics CSV and per-run directories with a JSON manifest.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    /// Seconds since the run started.
    pub wall_clock: f64,
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    /// `key=value` pairs joined by `;`.
    pub tags: String,
}

pub fn format_tags(tags: &[(&str, String)]) -> String {
    tags.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Append-only CSV writer; the header is written once, when the file is new.
pub struct MetricsSink {
    path: PathBuf,
    writer: csv::Writer<File>,
    run_id: String,
    seed: u64,
    start: Instant,
}

impl MetricsSink {
    pub fn open(path: &Path, run_id: impl Into<String>, seed: u64) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(["run_id", "wall_clock", "step", "metric", "value", "seed", "tags"])?;
            writer.flush().map_err(io_err(path))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            run_id: run_id.into(),
            seed,
            start: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&mut self, step: u64, metric: &str, value: f64, tags: &[(&str, String)]) -> Result<()> {
        let row = MetricsRow {
            run_id: self.run_id.clone(),
            wall_clock: self.start.elapsed().as_secs_f64(),
            step,
            metric: metric.into(),
            value,
            seed: self.seed,
            tags: format_tags(tags),
        };
        self.writer.serialize(&row)?;
        self.writer.flush().map_err(io_err(&self.path))?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

/// Written at the end of every run, next to the config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    pub artifacts: Vec<String>,
    pub version: String,
}

/// One command invocation: output directory, config snapshot and metrics.
pub struct Run {
    pub dir: PathBuf,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics: MetricsSink,
    run_id: String,
    artifacts: Vec<String>,
    started_unix: u64,
    start: Instant,
}

impl Run {
    /// Creates `dir`, snapshots the config and starts a fresh metrics file.
    pub fn create(dir: &Path, command: &str, seed: u64, config: ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let config_path = dir.join(CONFIG_FILE);
        std::fs::write(&config_path, config.to_json()?).map_err(io_err(&config_path))?;
        let metrics_path = dir.join(METRICS_FILE);
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path).map_err(io_err(&metrics_path))?;
        }
        let hash = config.hash()?;
        let run_id = format!("{command}-s{seed}-{}", &hash[..8]);
        Ok(Self {
            metrics: MetricsSink::open(&metrics_path, run_id.clone(), seed)?,
            dir: dir.to_path_buf(),
            command: command.into(),
            seed,
            config,
            run_id,
            artifacts: vec![CONFIG_FILE.into(), METRICS_FILE.into()],
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            start: Instant::now(),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Path of an output file, registered in the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.artifact(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)?).map_err(io_err(&path))
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            run_id: self.run_id,
            command: self.command,
            seed: self.seed,
            config_hash: self.config.hash()?,
            started_unix: self.started_unix,
            elapsed_secs: self.start.elapsed().as_secs_f64(),
            artifacts: self.artifacts,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sink_appends_under_a_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut a = MetricsSink::open(&path, "r1", 3).unwrap();
        a.record(1, "loss", 0.5, &[("mask", "rcbc".into())]).unwrap();
        drop(a);
        let mut b = MetricsSink::open(&path, "r1", 3).unwrap();
        b.record(2, "needs,quote", 0.25, &[("note", "a \"b\"".into())]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("run_id")).count(), 1);
        assert!(text.contains("\"needs,quote\""));
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].tags, "mask=rcbc");
        assert_eq!(rows[1].metric, "needs,quote");
        assert_eq!(rows[1].tags, "note=a \"b\"");
    }

    #[test]
    fn run_writes_snapshot_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default().resolve().unwrap();
        let mut run = Run::create(dir.path(), "gen-data", 4, cfg.clone()).unwrap();
        run.metrics.record(0, "x", 1.0, &[]).unwrap();
        run.write_json("extra.json", &vec![1, 2]).unwrap();
        let m = run.finish().unwrap();
        assert!(m.run_id.starts_with("gen-data-s4-"));
        assert!(m.artifacts.contains(&"extra.json".to_string()));
        let snap = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(snap, cfg);
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
