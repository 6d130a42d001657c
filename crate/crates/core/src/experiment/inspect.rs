use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{soften_distribution, softmax_temperature, virtual_teacher};
use crate::nn::Model;

/// Temperatures shown by default.
pub const DEFAULT_TAUS: [f64; 6] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// Where soft targets come from.
pub enum SoftTargetSource<'a> {
    /// A trained network evaluated on the first `count` samples of `data`.
    Model {
        model: &'a Model,
        data: &'a Dataset,
        count: usize,
    },
    /// The hand-designed teacher for the given labels.
    Virtual {
        classes: usize,
        a: f64,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetRow {
    pub sample: usize,
    pub label: usize,
    pub tau: f64,
    pub probs: Vec<f64>,
    pub uniform: f64,
    /// `KL(u, p_τ)`; infinite when some class has probability zero.
    pub kl_uniform: f64,
}

fn kl_from_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter()
        .map(|&v| if v > 0.0 { (1.0 / k) * ((1.0 / k).ln() - v.ln()) } else { f64::INFINITY })
        .sum()
}

/// One row per (τ, sample), τ-major.
pub fn soft_target_table(source: &SoftTargetSource<'_>, taus: &[f64]) -> Result<Vec<SoftTargetRow>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no temperatures given".into()));
    }
    let mut rows = Vec::new();
    match source {
        SoftTargetSource::Model { model, data, count } => {
            if data.num_classes() != model.num_classes() {
                return Err(Error::shape(
                    "inspect_soft_targets",
                    format!("model has {} classes, samples {}", model.num_classes(), data.num_classes()),
                ));
            }
            let n = (*count).min(data.len());
            if n == 0 {
                return Err(Error::InvalidArgument("no samples to inspect".into()));
            }
            let idx: Vec<usize> = (0..n).collect();
            let (x, labels) = data.gather(&idx)?;
            let logits = model.predict(&x)?;
            for &tau in taus {
                let p = softmax_temperature(&logits, tau)?;
                push_rows(&mut rows, &p, &labels, tau);
            }
        }
        SoftTargetSource::Virtual { classes, a, labels } => {
            let base = virtual_teacher(labels, *classes, *a)?;
            for &tau in taus {
                let p = soften_distribution(&base, tau)?;
                push_rows(&mut rows, &p, labels, tau);
            }
        }
    }
    Ok(rows)
}

fn push_rows(rows: &mut Vec<SoftTargetRow>, p: &crate::losses::Distribution, labels: &[usize], tau: f64) {
    let k = p.classes();
    for (i, &label) in labels.iter().enumerate() {
        let probs = p.row(i).to_vec();
        rows.push(SoftTargetRow {
            sample: i,
            label,
            tau,
            kl_uniform: kl_from_uniform(&probs),
            probs,
            uniform: 1.0 / k as f64,
        });
    }
}

/// Tab-separated table: `sample label tau p0..p{K-1} uniform kl_uniform`.
pub fn soft_targets_tsv(rows: &[SoftTargetRow]) -> String {
    let k = rows.first().map_or(0, |r| r.probs.len());
    let mut out = String::from("sample\tlabel\ttau");
    for c in 0..k {
        let _ = write!(out, "\tp{c}");
    }
    out.push_str("\tuniform\tkl_uniform\n");
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.sample, r.label, r.tau);
        for p in &r.probs {
            let _ = write!(out, "\t{p}");
        }
        let _ = writeln!(out, "\t{}\t{}", r.uniform, r.kl_uniform);
    }
    out
}
