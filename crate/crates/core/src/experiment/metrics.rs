use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{EpochRecord, RunHistory};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const TIMING_FILE: &str = "timing.ndjson";

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum MetricsRecord {
    Epoch(EpochLine),
    Summary(SummaryLine),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLine {
    pub v: u32,
    pub run: String,
    pub seed: u64,
    /// 1 for single-stage protocols; tf-self writes stage 1 then stage 2.
    pub stage: u32,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryLine {
    pub v: u32,
    pub run: String,
    pub seed: u64,
    pub protocol: String,
    pub dataset: String,
    pub model: String,
    pub epochs: usize,
    pub steps: usize,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_best_test_acc: Option<f64>,
}

/// Wall-clock data, kept out of the metrics file so that repeated runs
/// produce identical metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingLine {
    pub v: u32,
    pub run: String,
    pub seed: u64,
    pub stage: u32,
    pub steps: usize,
    pub wall_seconds: f64,
    pub seconds_per_step: f64,
}

pub fn epoch_lines(run: &str, seed: u64, stage: u32, records: &[EpochRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .map(|r| {
            MetricsRecord::Epoch(EpochLine {
                v: SCHEMA_VERSION,
                run: run.to_string(),
                seed,
                stage,
                epoch: r.epoch,
                lr: r.lr,
                train_loss: r.train_loss,
                train_acc: r.train_acc,
                test_loss: r.test_loss,
                test_acc: r.test_acc,
            })
        })
        .collect()
}

pub fn timing_line(run: &str, seed: u64, stage: u32, h: &RunHistory) -> TimingLine {
    TimingLine {
        v: SCHEMA_VERSION,
        run: run.to_string(),
        seed,
        stage,
        steps: h.steps,
        wall_seconds: h.wall_seconds,
        seconds_per_step: if h.steps == 0 { 0.0 } else { h.wall_seconds / h.steps as f64 },
    }
}

pub fn to_ndjson<T: Serialize>(lines: &[T]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("metrics line {}: {e}", i + 1)))?;
        let v = match &rec {
            MetricsRecord::Epoch(e) => e.v,
            MetricsRecord::Summary(s) => s.v,
        };
        if v != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "metrics line {}: schema version {v}, expected {SCHEMA_VERSION}",
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.1,
            train_loss: 1.5,
            train_acc: 0.25,
            test_loss: 1.25,
            test_acc: 0.5,
        }
    }

    #[test]
    fn roundtrip_and_version_field() {
        let mut lines = epoch_lines("baseline/seed-0", 0, 1, &[record(0), record(1)]);
        lines.push(MetricsRecord::Summary(SummaryLine {
            v: SCHEMA_VERSION,
            run: "baseline/seed-0".into(),
            seed: 0,
            protocol: "baseline".into(),
            dataset: "d".into(),
            model: "m".into(),
            epochs: 2,
            steps: 10,
            best_test_acc: 0.5,
            final_test_acc: 0.5,
            teacher_test_acc: None,
            stage1_best_test_acc: None,
        }));
        let text = to_ndjson(&lines).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.contains("\"v\":1")));
        assert!(text.starts_with("{\"type\":\"epoch\""));
        assert_eq!(parse_metrics(&text).unwrap(), lines);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let text = to_ndjson(&epoch_lines("r", 0, 1, &[record(0)])).unwrap().replace("\"v\":1", "\"v\":2");
        assert!(parse_metrics(&text).is_err());
        assert!(parse_metrics("{\"type\":\"epoch\"}\n").is_err());
        assert!(parse_metrics("not json\n").is_err());
    }
}
