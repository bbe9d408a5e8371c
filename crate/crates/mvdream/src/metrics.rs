//! Newline-delimited JSON metrics.
//!
//! The metrics file starts with one `config` record echoing every key, then
//! holds one `episode` record per collected episode. Wall-clock time goes to
//! a separate timing file so that the metrics of two identical runs compare
//! equal byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub nce: f64,
    pub kl: f64,
    pub reward: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub actor: f64,
    pub critic: f64,
    pub imagined_return: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Config {
        seed: u64,
        config: BTreeMap<String, String>,
    },
    Episode(MetricsRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Physics steps collected so far.
    pub step: u64,
    pub episode: u64,
    pub seed: u64,
    pub train_steps: u64,
    pub prefill: bool,
    pub train_return: f64,
    /// Absent for random prefill episodes.
    pub expl_noise: Option<f64>,
    /// Mean losses over this episode's train steps; absent during prefill.
    pub losses: Option<LossSummary>,
    pub eval_return: Option<f64>,
    pub eval_returns: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub episode: u64,
    pub wall_clock_s: f64,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    path: PathBuf,
    timing_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.jsonl");
        let timing_path = dir.join("timing.jsonl");
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| HarnessError::io(p, e));
        Ok(Self {
            metrics: open(&path)?,
            timing: open(&timing_path)?,
            path,
            timing_path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_config(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        let config = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.write(&Record::Config { seed: cfg.seed, config })
    }

    pub fn write_episode(&mut self, rec: MetricsRecord, wall_clock_s: f64) -> Result<()> {
        let timing = TimingRecord {
            episode: rec.episode,
            wall_clock_s,
        };
        self.write(&Record::Episode(rec))?;
        let line = serde_json::to_string(&timing).expect("timing record serializes");
        writeln!(self.timing, "{line}")
            .and_then(|_| self.timing.flush())
            .map_err(|e| HarnessError::io(&self.timing_path, e))
    }

    fn write(&mut self, rec: &Record) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metrics record serializes");
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Parses a metrics file, one record per line.
pub fn read_metrics(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Episode records of a parsed metrics file.
pub fn episodes(records: &[Record]) -> impl Iterator<Item = &MetricsRecord> {
    records.iter().filter_map(|r| match r {
        Record::Episode(m) => Some(m),
        Record::Config { .. } => None,
    })
}

/// The last recorded evaluation return.
pub fn final_eval_return(records: &[Record]) -> Option<f64> {
    episodes(records).filter_map(|m| m.eval_return).last()
}
