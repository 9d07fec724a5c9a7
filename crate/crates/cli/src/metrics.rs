//! Line-delimited JSON logs, rewritten atomically on every append.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use msinet_core::data::write_atomic;
use msinet_core::{Error, Result};
use serde::Serialize;

/// One record of `metrics.jsonl`. Holds nothing time-dependent, so equal
/// runs write equal files.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// One record of `timing.jsonl`, the wall-clock companion of a metrics record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRecord {
    pub run: String,
    pub epoch: usize,
    pub seconds: f64,
}

/// Append-only log. Appends rewrite the whole file through a temporary so
/// that a crash never leaves a torn line.
#[derive(Debug)]
pub struct JsonLog {
    path: PathBuf,
    text: String,
    last_epoch: HashMap<String, usize>,
}

impl JsonLog {
    /// Continues the log at `path` if it exists.
    pub fn open(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(JsonLog { path: path.to_path_buf(), text, last_epoch: HashMap::new() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends `record`; epochs of one run may not go backwards.
    pub fn push<R: Serialize>(&mut self, run: &str, epoch: usize, record: &R) -> Result<()> {
        if let Some(&last) = self.last_epoch.get(run) {
            if epoch < last {
                return Err(Error::Internal(format!("run {run}: epoch {epoch} logged after {last}")));
            }
        }
        let line = serde_json::to_string(record).map_err(|e| Error::Internal(format!("metrics encoding: {e}")))?;
        self.text.push_str(&line);
        self.text.push('\n');
        write_atomic(&self.path, self.text.as_bytes())?;
        self.last_epoch.insert(run.to_string(), epoch);
        Ok(())
    }
}

/// The pair of logs every command writes into its output directory.
#[derive(Debug)]
pub struct RunLogs {
    pub metrics: JsonLog,
    pub timing: JsonLog,
}

impl RunLogs {
    pub fn open(out: &Path) -> Result<Self> {
        Ok(RunLogs { metrics: JsonLog::open(&out.join("metrics.jsonl"))?, timing: JsonLog::open(&out.join("timing.jsonl"))? })
    }

    pub fn record(&mut self, run: &str, epoch: usize, metrics: BTreeMap<String, f64>, seconds: f64) -> Result<()> {
        let m = MetricsRecord { run: run.to_string(), epoch, metrics };
        self.metrics.push(run, epoch, &m)?;
        self.timing.push(run, epoch, &TimingRecord { run: run.to_string(), epoch, seconds })
    }
}
