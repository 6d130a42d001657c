use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{read_metrics, MetricsRecord, SummaryLine, SCHEMA_VERSION};
use crate::error::{Error, Result};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_MD: &str = "summary.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_best_test_acc: Option<f64>,
}

/// Aggregate over the seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub v: u32,
    pub protocol: String,
    pub dataset: String,
    pub model: String,
    pub runs: Vec<SeedSummary>,
    pub mean_best_test_acc: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std_best_test_acc: f64,
    pub mean_final_test_acc: f64,
    pub std_final_test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_teacher_test_acc: Option<f64>,
}

/// `(mean, sample std)`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    /// Aggregates per-seed summary lines. All lines must describe the same
    /// protocol, dataset and model.
    pub fn from_lines(lines: &[SummaryLine]) -> Result<Self> {
        let first = lines
            .first()
            .ok_or_else(|| Error::InvalidArgument("no summary records to aggregate".into()))?;
        if let Some(l) = lines
            .iter()
            .find(|l| l.protocol != first.protocol || l.dataset != first.dataset || l.model != first.model)
        {
            return Err(Error::InvalidArgument(format!(
                "seed {} describes {}/{}/{}, seed {} describes {}/{}/{}",
                first.seed, first.protocol, first.dataset, first.model, l.seed, l.protocol, l.dataset, l.model
            )));
        }
        let runs: Vec<SeedSummary> = lines
            .iter()
            .map(|l| SeedSummary {
                seed: l.seed,
                best_test_acc: l.best_test_acc,
                final_test_acc: l.final_test_acc,
                teacher_test_acc: l.teacher_test_acc,
                stage1_best_test_acc: l.stage1_best_test_acc,
            })
            .collect();
        let best: Vec<f64> = runs.iter().map(|r| r.best_test_acc).collect();
        let fin: Vec<f64> = runs.iter().map(|r| r.final_test_acc).collect();
        let teacher: Vec<f64> = runs.iter().filter_map(|r| r.teacher_test_acc).collect();
        let (mean_best_test_acc, std_best_test_acc) = mean_std(&best);
        let (mean_final_test_acc, std_final_test_acc) = mean_std(&fin);
        Ok(Summary {
            v: SCHEMA_VERSION,
            protocol: first.protocol.clone(),
            dataset: first.dataset.clone(),
            model: first.model.clone(),
            runs,
            mean_best_test_acc,
            std_best_test_acc,
            mean_final_test_acc,
            std_final_test_acc,
            mean_teacher_test_acc: (teacher.len() == lines.len()).then(|| mean_std(&teacher).0),
        })
    }

    /// Reads `summary.json`, or aggregates the summary records of a
    /// metrics file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let s: Summary = serde_json::from_str(&text)?;
            if s.v != SCHEMA_VERSION {
                return Err(Error::InvalidArgument(format!(
                    "{}: schema version {}, expected {SCHEMA_VERSION}",
                    path.display(),
                    s.v
                )));
            }
            return Ok(s);
        }
        let lines: Vec<SummaryLine> = read_metrics(path)?
            .into_iter()
            .filter_map(|r| match r {
                MetricsRecord::Summary(s) => Some(s),
                MetricsRecord::Epoch(_) => None,
            })
            .collect();
        if lines.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no summary record", path.display())));
        }
        Self::from_lines(&lines)
    }

    /// One-row mean ± std table in percent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| protocol | dataset | model | seeds | best test acc (%) | final test acc (%) |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            self.protocol,
            self.dataset,
            self.model,
            self.runs.len(),
            pct_pm(self.mean_best_test_acc, self.std_best_test_acc),
            pct_pm(self.mean_final_test_acc, self.std_final_test_acc),
        ));
        if let Some(t) = self.mean_teacher_test_acc {
            out.push_str(&format!("\nmean teacher test acc: {:.2}%\n", 100.0 * t));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        write_file(&dir.join(SUMMARY_JSON), &json)?;
        write_file(&dir.join(SUMMARY_MD), &self.to_markdown())
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pct_pm(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

/// Signed difference in percentage points with two decimals, e.g. `+2.50`.
pub fn format_delta(baseline: f64, method: f64) -> String {
    let d = (100.0 * (method - baseline) * 100.0).round() / 100.0;
    if d >= 0.0 {
        format!("+{:.2}", d.abs())
    } else {
        format!("{d:.2}")
    }
}

/// Baseline column followed by each method with its Δ over the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub dataset: String,
    pub model: String,
    /// `(label, summary)`; the first entry is the baseline.
    pub columns: Vec<(String, Summary)>,
}

impl Comparison {
    pub fn new(columns: Vec<(String, Summary)>) -> Result<Self> {
        if columns.len() < 2 {
            return Err(Error::InvalidArgument("compare needs at least two summaries".into()));
        }
        let (_, base) = &columns[0];
        for (label, s) in &columns[1..] {
            if s.dataset != base.dataset || s.model != base.model {
                return Err(Error::InvalidArgument(format!(
                    "{label} is {} on {}, baseline is {} on {}",
                    s.model, s.dataset, base.model, base.dataset
                )));
            }
        }
        Ok(Comparison {
            dataset: base.dataset.clone(),
            model: base.model.clone(),
            columns,
        })
    }

    /// Δ of each method column over the baseline, in percentage points.
    pub fn deltas(&self) -> Vec<(String, String)> {
        let base = self.columns[0].1.mean_best_test_acc;
        self.columns[1..]
            .iter()
            .map(|(l, s)| (l.clone(), format_delta(base, s.mean_best_test_acc)))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut head = String::from("| dataset | model |");
        let mut rule = String::from("|---|---|");
        let mut row = format!("| {} | {} |", self.dataset, self.model);
        let base = self.columns[0].1.mean_best_test_acc;
        for (i, (label, s)) in self.columns.iter().enumerate() {
            head.push_str(&format!(" {label} |"));
            rule.push_str("---|");
            let cell = pct_pm(s.mean_best_test_acc, s.std_best_test_acc);
            if i == 0 {
                row.push_str(&format!(" {cell} |"));
            } else {
                row.push_str(&format!(" {cell} ({}) |", format_delta(base, s.mean_best_test_acc)));
            }
        }
        format!("{head}\n{rule}\n{row}\n")
    }
}
