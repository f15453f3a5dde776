use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Supervised loss per task name.
    pub losses: BTreeMap<String, f64>,
    /// Convergence loss per task name.
    pub conv: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
    /// Selection counts per gated route since the previous evaluation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gates: BTreeMap<String, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub wall_clock_secs: f64,
    pub best_step: Option<usize>,
    pub final_eval: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

/// Append-only record of a training run; steps strictly increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub summary: Option<RunSummary>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header { config_hash: String, seed: u64 },
    Step(StepRecord),
    Summary(RunSummary),
}

impl RunLog {
    pub fn new(config_hash: String, seed: u64) -> Self {
        RunLog { config_hash, seed, records: Vec::new(), summary: None }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::config(format!("log step {} after {}", record.step, last.step)));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last_mut(&mut self) -> Option<&mut StepRecord> {
        self.records.last_mut()
    }

    pub fn total_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn task_losses(&self, task: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.losses.get(task).copied()).collect()
    }

    /// `(step, value)` of an evaluation metric over the run.
    pub fn eval_curve(&self, key: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| Some((r.step as u64, r.eval.as_ref()?.get(key)?)))
            .collect()
    }

    /// JSON lines: a header, one line per step, then the summary.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        let header = Line::Header { config_hash: self.config_hash.clone(), seed: self.seed };
        writeln!(f, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(&Line::Step(r.clone())).expect("serializable"))?;
        }
        if let Some(s) = &self.summary {
            writeln!(f, "{}", serde_json::to_string(&Line::Summary(s.clone())).expect("serializable"))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::io::BufReader::new(fs::File::open(path)?);
        let mut log: Option<RunLog> = None;
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match (parsed, log.as_mut()) {
                (Line::Header { config_hash, seed }, None) => log = Some(RunLog::new(config_hash, seed)),
                (Line::Step(r), Some(l)) => l.push(r)?,
                (Line::Summary(s), Some(l)) => l.summary = Some(s),
                _ => return Err(Error::data(format!("{}:{}: unexpected record", path.display(), n + 1))),
            }
        }
        log.ok_or_else(|| Error::data(format!("{}: empty log", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize) -> StepRecord {
        StepRecord {
            step,
            epoch: 0,
            losses: [("intent".to_string(), 0.5)].into(),
            conv: BTreeMap::new(),
            total: 0.5,
            eval: None,
            gates: BTreeMap::new(),
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut l = RunLog::new("h".into(), 1);
        l.push(rec(1)).unwrap();
        assert!(l.push(rec(1)).is_err());
        l.push(rec(2)).unwrap();
    }

    #[test]
    fn jsonl_round_trip() {
        let mut l = RunLog::new("abc".into(), 7);
        l.push(rec(1)).unwrap();
        let mut r = rec(2);
        r.eval = Some(MetricsReport { intent_acc: Some(0.75), ..Default::default() });
        l.push(r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        l.write_jsonl(&p).unwrap();
        assert_eq!(RunLog::read_jsonl(&p).unwrap(), l);
        assert_eq!(l.eval_curve("intent_acc"), vec![(2, 0.75)]);
    }
}
