//! Target distributions and losses for label smoothing and distillation.
//!
//! All losses take student logits of shape `[N, K]` recorded on a [`Tape`]
//! and return a scalar node holding the batch mean. Targets (one-hot labels,
//! smoothed labels, teacher soft targets, the virtual teacher) are plain
//! [`Distribution`]s and never receive gradients.
//!
//! The loss family, with `p` the student's softmax, `p_τ` its
//! temperature-softened version and `q` the one-hot label:
//!
//! | kind    | loss                                        |
//! |---------|---------------------------------------------|
//! | CE      | `H(q, p)`                                   |
//! | LSR     | `(1-α) H(q, p) + α KL(u, p)`                |
//! | KD      | `(1-α) H(q, p) + α KL(p^t_τ, p_τ)`          |
//! | TfSelf  | KD with a frozen pre-trained copy as teacher |
//! | TfReg   | `(1-α) H(q, p) + α KL(p^d_τ, p_τ)`          |
//!
//! where `u` is uniform and `p^d` is the two-level virtual teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var, XentTerm};

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic matrix of `rows × classes` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
    classes: usize,
}

impl Distribution {
    pub fn new(probs: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || probs.is_empty() || probs.len() % classes != 0 {
            return Err(Error::InvalidDistribution(format!(
                "{} values do not form rows of {classes} classes",
                probs.len()
            )));
        }
        for (r, row) in probs.chunks_exact(classes).enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidDistribution(format!("row {r} has entry {v}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidDistribution(format!("row {r} sums to {s}")));
            }
        }
        Ok(Distribution { probs, classes })
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        smoothed_labels(labels, classes, 0.0)
    }

    pub fn uniform(rows: usize, classes: usize) -> Result<Self> {
        if rows == 0 || classes == 0 {
            return Err(Error::InvalidArgument("uniform distribution needs rows, classes > 0".into()));
        }
        Ok(Distribution {
            probs: vec![1.0 / classes as f64; rows * classes],
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.classes..(r + 1) * self.classes]
    }

    /// Index of the largest entry of row `r`, ties toward the lowest index.
    pub fn argmax(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `(rows, classes)` of a 2-D logits node.
fn logits_dims(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    match tape.shape(logits) {
        [n, k] => Ok((*n, *k)),
        s => Err(Error::shape("loss", format!("logits must be [N, K], got {s:?}"))),
    }
}

fn check_target(op: &'static str, target: &Distribution, tape: &Tape, log_p: Var) -> Result<()> {
    let (n, k) = logits_dims(tape, log_p)?;
    if target.classes != k || target.rows() != n {
        return Err(Error::shape(
            op,
            format!("target is {}x{}, log-probabilities {n}x{k}", target.rows(), target.classes),
        ));
    }
    Ok(())
}

/// Row-wise `softmax(z / τ)` of logits shaped `[K]` or `[N, K]`.
pub fn softmax_temperature(logits: &Tensor, tau: f64) -> Result<Distribution> {
    let logp = log_softmax_temperature(logits, tau)?;
    let k = *logits.shape().last().unwrap_or(&1);
    Distribution::new(logp.into_iter().map(f64::exp).collect(), k)
}

/// Row-wise `log softmax(z / τ)` of logits shaped `[K]` or `[N, K]`.
pub fn log_softmax_temperature(logits: &Tensor, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let k = match logits.shape() {
        [k] | [_, k] => *k,
        s => return Err(Error::shape("softmax_temperature", format!("expected [K] or [N, K], got {s:?}"))),
    };
    let scaled: Vec<f64> = logits.data().iter().map(|z| z / tau).collect();
    let mut out = vec![0.0; scaled.len()];
    log_softmax_rows(&scaled, k, &mut out);
    Ok(out)
}

/// Batch-mean entropy `-Σ p log p`, with `0 log 0 = 0`.
pub fn entropy(p: &Distribution) -> f64 {
    let total: f64 = p.probs.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    total / p.rows() as f64
}

/// Batch-mean cross-entropy `H(q, p) = -Σ q log p`, where `log_p` comes from
/// a log-softmax.
pub fn cross_entropy(tape: &mut Tape, q: &Distribution, log_p: Var) -> Result<Var> {
    check_target("cross_entropy", q, tape, log_p)?;
    let shape = tape.shape(log_p).to_vec();
    let target = tape.constant(shape, q.probs.clone())?;
    let prod = tape.mul(target, log_p)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, -1.0 / q.rows() as f64)
}

/// Batch-mean `KL(target ‖ p) = Σ target (log target - log p)`. The target
/// is the reference (teacher) side and is treated as a constant.
pub fn kl_divergence(tape: &mut Tape, target: &Distribution, log_p: Var) -> Result<Var> {
    check_target("kl_divergence", target, tape, log_p)?;
    let shape = tape.shape(log_p).to_vec();
    // Zero-mass entries contribute nothing; any finite log works for them.
    let log_t: Vec<f64> = target.probs.iter().map(|&t| if t > 0.0 { t.ln() } else { 0.0 }).collect();
    let t = tape.constant(shape.clone(), target.probs.clone())?;
    let log_t = tape.constant(shape, log_t)?;
    let diff = tape.sub(log_t, log_p)?;
    let prod = tape.mul(t, diff)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, 1.0 / target.rows() as f64)
}

/// Label-smoothed targets `(1-α) q + α u`: the correct class receives
/// `1 - α + α/K`, every other class `α/K`.
pub fn smoothed_labels(labels: &[usize], classes: usize, alpha: f64) -> Result<Distribution> {
    check_alpha(alpha)?;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    check_labels(labels, classes)?;
    let off = alpha / classes as f64;
    let mut probs = vec![off; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        probs[r * classes + y] = 1.0 - alpha + off;
    }
    Ok(Distribution { probs, classes })
}

/// Teacher-smoothed targets `(1-α) q + α p^t`.
pub fn combined_smoothed_target(labels: &[usize], teacher: &Distribution, alpha: f64) -> Result<Distribution> {
    check_alpha(alpha)?;
    if labels.len() != teacher.rows() {
        return Err(Error::shape(
            "combined_smoothed_target",
            format!("{} labels vs {} teacher rows", labels.len(), teacher.rows()),
        ));
    }
    check_labels(labels, teacher.classes)?;
    let k = teacher.classes;
    let mut probs: Vec<f64> = teacher.probs.iter().map(|p| alpha * p).collect();
    for (r, &y) in labels.iter().enumerate() {
        probs[r * k + y] += 1.0 - alpha;
    }
    Ok(Distribution { probs, classes: k })
}

/// The hand-designed teacher: probability `a` on the correct class and
/// `(1-a)/(K-1)` on each of the others.
pub fn virtual_teacher(labels: &[usize], classes: usize, a: f64) -> Result<Distribution> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if !(a > 1.0 / classes as f64 && a <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "correct-class probability must lie in (1/K, 1] = ({}, 1], got {a}",
            1.0 / classes as f64
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    check_labels(labels, classes)?;
    let off = (1.0 - a) / (classes - 1) as f64;
    let mut probs = vec![off; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        probs[r * classes + y] = a;
    }
    Ok(Distribution { probs, classes })
}

/// [`virtual_teacher`] followed by [`soften_distribution`], in closed form:
/// each row has only two distinct levels.
pub fn softened_virtual_teacher(labels: &[usize], classes: usize, a: f64, tau: f64) -> Result<Distribution> {
    virtual_target(labels, classes, a, tau).map(|(d, _)| d)
}

/// Softened virtual teacher and its batch-mean entropy.
fn virtual_target(labels: &[usize], classes: usize, a: f64, tau: f64) -> Result<(Distribution, f64)> {
    check_tau(tau)?;
    let base = virtual_teacher(&labels[..labels.len().min(1)], classes, a)?;
    check_labels(labels, classes)?;
    let soft = soften_distribution(&base, tau)?;
    let (hi, lo) = (soft.probs[labels[0]], soft.probs[(labels[0] + 1) % classes]);
    let mut probs = vec![lo; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        probs[r * classes + y] = hi;
    }
    Ok((Distribution { probs, classes }, entropy(&soft)))
}

/// Temperature-softens a probability distribution as `softmax(log p / τ)`.
///
/// Zero entries have `log p = -∞` and stay at zero for every `τ`, which is
/// the limit of the positive case.
pub fn soften_distribution(p: &Distribution, tau: f64) -> Result<Distribution> {
    check_tau(tau)?;
    if tau == 1.0 {
        return Ok(p.clone());
    }
    let k = p.classes;
    let mut probs = vec![0.0; p.probs.len()];
    for (src, dst) in p.probs.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
        let m = src
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v.ln() / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = if v > 0.0 { (v.ln() / tau - m).exp() } else { 0.0 };
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Distribution::new(probs, k)
}

/// Label smoothing loss `(1-α) H(q, p) + α KL(u, p)`.
pub fn lsr_loss(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let (n, k) = logits_dims(tape, logits)?;
    let uniform = Distribution::uniform(n, k)?;
    mixed_loss(tape, logits, labels, &uniform, entropy(&uniform), alpha, 1.0, false)
}

/// Label smoothing as a single cross-entropy against the smoothed targets,
/// `H(q', p)`. Differs from [`lsr_loss`] by the constant `α H(u)`.
pub fn lsr_loss_direct(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (_, k) = logits_dims(tape, logits)?;
    let q = smoothed_labels(labels, k, alpha)?;
    let log_p = tape.log_softmax(logits, 1)?;
    cross_entropy(tape, &q, log_p)
}

/// Knowledge distillation loss `(1-α) H(q, p) + α KL(p^t_τ, p_τ)`.
///
/// The cross-entropy term uses the unsoftened student. With
/// `tau_squared_scaling` the KL term is multiplied by `τ²`. Teacher logits
/// are plain values and carry no gradient.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    alpha: f64,
    tau: f64,
    tau_squared_scaling: bool,
) -> Result<Var> {
    check_alpha(alpha)?;
    let (n, k) = logits_dims(tape, student_logits)?;
    if teacher_logits.shape() != [n, k] {
        return Err(Error::shape(
            "kd_loss",
            format!("teacher logits {:?} vs student [{n}, {k}]", teacher_logits.shape()),
        ));
    }
    let soft = softmax_temperature(teacher_logits, tau)?;
    mixed_loss(tape, student_logits, labels, &soft, entropy(&soft), alpha, tau, tau_squared_scaling)
}

/// Self-distillation loss: [`kd_loss`] against a frozen, pre-trained copy of
/// the same architecture.
pub fn tf_kd_self_loss(
    tape: &mut Tape,
    student_logits: Var,
    frozen_teacher_logits: &Tensor,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<Var> {
    kd_loss(tape, student_logits, frozen_teacher_logits, labels, alpha, tau, false)
}

/// Distillation from the virtual teacher: `(1-α) H(q, p) + α KL(p^d_τ, p_τ)`.
/// No teacher network is involved.
pub fn tf_kd_reg_loss(
    tape: &mut Tape,
    student_logits: Var,
    labels: &[usize],
    classes: usize,
    alpha: f64,
    tau: f64,
    a: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    let (target, h) = virtual_target(labels, classes, a, tau)?;
    mixed_loss(tape, student_logits, labels, &target, h, alpha, tau, false)
}

/// `(1-α) H(q, p) + α s KL(target, p_τ)` with `s = τ²` when scaling.
/// `target_entropy` is the batch-mean entropy of `soft_target`.
#[allow(clippy::too_many_arguments)]
fn mixed_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    soft_target: &Distribution,
    target_entropy: f64,
    alpha: f64,
    tau: f64,
    tau_squared_scaling: bool,
) -> Result<Var> {
    check_tau(tau)?;
    let (_, k) = logits_dims(tape, logits)?;
    check_target("kd_loss", soft_target, tape, logits)?;
    let hard = Distribution::one_hot(labels, k)?;
    let kl_weight = if tau_squared_scaling { alpha * tau * tau } else { alpha };
    // KL(t ‖ p_τ) = H(t, p_τ) - H(t).
    let terms = [
        XentTerm {
            weight: 1.0 - alpha,
            target: &hard.probs,
            tau: 1.0,
        },
        XentTerm {
            weight: kl_weight,
            target: &soft_target.probs,
            tau,
        },
    ];
    tape.softmax_cross_entropy_mix(logits, &terms, -kl_weight * target_entropy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Lsr,
    Kd,
    TfSelf,
    TfReg,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Lsr => "lsr",
            LossKind::Kd => "kd",
            LossKind::TfSelf => "tf-self",
            LossKind::TfReg => "tf-reg",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which loss to train with, and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub tau: f64,
    /// Correct-class probability of the virtual teacher (TfReg only).
    pub a: f64,
    pub tau_squared_scaling: bool,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::Ce,
            alpha: 0.0,
            tau: 1.0,
            a: 1.0,
            tau_squared_scaling: false,
        }
    }

    pub fn lsr(alpha: f64) -> Self {
        LossSpec {
            kind: LossKind::Lsr,
            alpha,
            ..Self::cross_entropy()
        }
    }

    pub fn kd(alpha: f64, tau: f64) -> Self {
        LossSpec {
            kind: LossKind::Kd,
            alpha,
            tau,
            ..Self::cross_entropy()
        }
    }

    pub fn tf_self(alpha: f64, tau: f64) -> Self {
        LossSpec {
            kind: LossKind::TfSelf,
            ..Self::kd(alpha, tau)
        }
    }

    pub fn tf_reg(alpha: f64, tau: f64, a: f64) -> Self {
        LossSpec {
            kind: LossKind::TfReg,
            alpha,
            tau,
            a,
            tau_squared_scaling: false,
        }
    }

    pub fn with_tau_squared_scaling(mut self, on: bool) -> Self {
        self.tau_squared_scaling = on;
        self
    }

    /// Whether this loss consumes teacher logits.
    pub fn needs_teacher(&self) -> bool {
        matches!(self.kind, LossKind::Kd | LossKind::TfSelf)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_alpha(self.alpha)?;
        check_tau(self.tau)?;
        if self.kind == LossKind::TfReg {
            if !(self.a >= 0.9 && self.a <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "virtual teacher correct-class probability must lie in [0.9, 1], got {}",
                    self.a
                )));
            }
            if self.a <= 1.0 / classes as f64 {
                return Err(Error::InvalidArgument(format!(
                    "virtual teacher probability {} does not exceed 1/K for K = {classes}",
                    self.a
                )));
            }
        }
        Ok(())
    }

    /// Records this loss on `tape` for a batch of student logits.
    pub fn compute(
        &self,
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        teacher_logits: Option<&Tensor>,
    ) -> Result<Var> {
        let (_, k) = logits_dims(tape, logits)?;
        self.validate(k)?;
        match (self.kind, teacher_logits) {
            (LossKind::Kd | LossKind::TfSelf, Some(t)) => {
                kd_loss(tape, logits, t, labels, self.alpha, self.tau, self.tau_squared_scaling)
            }
            (LossKind::Kd | LossKind::TfSelf, None) => Err(Error::InvalidArgument(format!(
                "{} loss requires teacher logits",
                self.kind
            ))),
            (_, Some(_)) => Err(Error::InvalidArgument(format!(
                "{} loss takes no teacher",
                self.kind
            ))),
            (LossKind::Ce, None) => {
                let q = Distribution::one_hot(labels, k)?;
                tape.softmax_cross_entropy(logits, &q.probs, 1.0)
            }
            (LossKind::Lsr, None) => lsr_loss(tape, logits, labels, self.alpha),
            (LossKind::TfReg, None) => {
                let (target, h) = virtual_target(labels, k, self.a, self.tau)?;
                mixed_loss(tape, logits, labels, &target, h, self.alpha, self.tau, self.tau_squared_scaling)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(tape: &mut Tape, rows: usize, data: &[f64]) -> Var {
        let k = data.len() / rows;
        tape.leaf(&Tensor::new(vec![rows, k], data.to_vec()).unwrap())
    }

    fn value(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.scalar(v).unwrap()
    }

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec(), p.len()).unwrap()
    }

    fn log_of(tape: &mut Tape, p: &[f64]) -> Var {
        let c = tape.constant(vec![1, p.len()], p.to_vec()).unwrap();
        tape.log(c).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.6], 2).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1], 2).is_err());
        assert!(Distribution::new(vec![0.5, 0.5, 1.0], 2).is_err());
        assert!(Distribution::new(vec![0.25, 0.75, 1.0, 0.0], 2).is_ok());
    }

    #[test]
    fn softmax_temperature_examples() {
        let z = Tensor::from_vec(vec![0.0, 0.0, 0.0]).unwrap();
        for p in softmax_temperature(&z, 20.0).unwrap().probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_temperature(&z, 1.0).unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in p.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = softmax_temperature(&z, 1000.0).unwrap();
        assert!(p.probs().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-3));
        assert_eq!(p.argmax(0), 2);
        assert!(softmax_temperature(&z, 0.0).is_err());
        assert!(softmax_temperature(&z, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        // One-hot against uniform over 10 classes.
        let q = Distribution::one_hot(&[3], 10).unwrap();
        let h = value(|t| {
            let z = logits(t, 1, &[0.0; 10]);
            let lp = t.log_softmax(z, 1)?;
            cross_entropy(t, &q, lp)
        });
        assert!((h - 10f64.ln()).abs() < 1e-12);

        let h = value(|t| {
            let lp = log_of(t, &[0.25, 0.75]);
            cross_entropy(t, &dist(&[0.5, 0.5]), lp)
        });
        assert!((h - 0.836_988_216_785_835_8).abs() < 1e-12);

        // q == p gives the entropy.
        let p = [0.2, 0.3, 0.5];
        let h = value(|t| {
            let lp = log_of(t, &p);
            cross_entropy(t, &dist(&p), lp)
        });
        assert!((h - entropy(&dist(&p))).abs() < 1e-15);

        let mut tape = Tape::new();
        let lp = log_of(&mut tape, &[0.25, 0.75]);
        assert!(cross_entropy(&mut tape, &dist(&[0.2, 0.3, 0.5]), lp).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&Distribution::uniform(1, 100).unwrap()) - 100f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&Distribution::one_hot(&[4], 7).unwrap()), 0.0);
        assert!((entropy(&dist(&[0.9, 0.1])) - 0.325_082_973_391_448_2).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = [0.1, 0.6, 0.3];
        let kl = value(|t| {
            let lp = log_of(t, &p);
            kl_divergence(t, &dist(&p), lp)
        });
        assert!(kl.abs() < 1e-16);

        let kl = value(|t| {
            let lp = log_of(t, &[0.25, 0.75]);
            kl_divergence(t, &dist(&[0.5, 0.5]), lp)
        });
        assert!((kl - 0.143_841_036_225_890_46).abs() < 1e-15);

        let u = Distribution::uniform(1, 3).unwrap();
        let kl = value(|t| {
            let lp = log_of(t, &p);
            kl_divergence(t, &u, lp)
        });
        let h = value(|t| {
            let lp = log_of(t, &p);
            cross_entropy(t, &u, lp)
        });
        assert!((kl - (h - entropy(&u))).abs() < 1e-12);
    }

    #[test]
    fn smoothed_label_examples() {
        let q = smoothed_labels(&[2], 5, 0.1).unwrap();
        let want = [0.02, 0.02, 0.92, 0.02, 0.02];
        for (a, b) in q.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(smoothed_labels(&[1], 3, 0.0).unwrap().probs(), &[0.0, 1.0, 0.0]);
        assert!(smoothed_labels(&[1], 4, 1.0).unwrap().probs().iter().all(|&p| p == 0.25));
        assert!(matches!(smoothed_labels(&[5], 5, 0.1), Err(Error::LabelOutOfRange { .. })));
        assert!(smoothed_labels(&[0], 5, 1.5).is_err());
    }

    #[test]
    fn lsr_examples() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let ce = value(|t| {
            let v = logits(t, 1, &z);
            LossSpec::cross_entropy().compute(t, v, &[2], None)
        });
        let lsr0 = value(|t| {
            let v = logits(t, 1, &z);
            lsr_loss(t, v, &[2], 0.0)
        });
        assert_eq!(ce, lsr0);

        // Uniform logits: KL(u, u) = 0 leaves (1-α) ln K, and the direct
        // form is ln K for every α.
        for alpha in [0.0, 0.3, 1.0] {
            let l = value(|t| {
                let v = logits(t, 1, &[1.5; 6]);
                lsr_loss(t, v, &[4], alpha)
            });
            assert!((l - (1.0 - alpha) * 6f64.ln()).abs() < 1e-12);
            let d = value(|t| {
                let v = logits(t, 1, &[1.5; 6]);
                lsr_loss_direct(t, v, &[4], alpha)
            });
            assert!((d - 6f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_target_examples() {
        let pt = dist(&[0.6, 0.4]);
        assert_eq!(combined_smoothed_target(&[0], &pt, 0.0).unwrap().probs(), &[1.0, 0.0]);
        assert_eq!(combined_smoothed_target(&[0], &pt, 1.0).unwrap().probs(), &[0.6, 0.4]);
        let c = combined_smoothed_target(&[0], &pt, 0.5).unwrap();
        assert!((c.probs()[0] - 0.8).abs() < 1e-15 && (c.probs()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn virtual_teacher_examples() {
        let p = virtual_teacher(&[6], 10, 0.9).unwrap();
        for (k, &v) in p.probs().iter().enumerate() {
            let want = if k == 6 { 0.9 } else { 0.1 / 9.0 };
            assert!((v - want).abs() < 1e-15);
        }
        let p = virtual_teacher(&[0], 100, 0.99).unwrap();
        assert!((p.probs()[1] - 0.01 / 99.0).abs() < 1e-18);
        assert!((p.probs()[1] - 1.0101e-4).abs() < 1e-8);
        assert_eq!(virtual_teacher(&[1], 3, 1.0).unwrap().probs(), &[0.0, 1.0, 0.0]);
        assert!(virtual_teacher(&[0], 10, 0.1).is_err());
        assert!(virtual_teacher(&[0], 1, 0.9).is_err());
    }

    #[test]
    fn soften_examples() {
        let p = virtual_teacher(&[6], 10, 0.9).unwrap();
        assert_eq!(soften_distribution(&p, 1.0).unwrap(), p);

        // Two-level distribution softened: ratio becomes (0.9 / (0.1/9))^(1/20) = 81^(1/20).
        let s = soften_distribution(&p, 20.0).unwrap();
        let ratio = s.probs()[6] / s.probs()[0];
        assert!((ratio - 1.245_730_939_615_517_3).abs() < 1e-12);
        assert_eq!(s.argmax(0), 6);

        let s = soften_distribution(&dist(&[0.7, 0.2, 0.05, 0.05]), 1e6).unwrap();
        assert!(s.probs().iter().all(|v| (v - 0.25).abs() < 1e-4));

        // Zero mass is preserved.
        let s = soften_distribution(&dist(&[0.0, 1.0]), 20.0).unwrap();
        assert_eq!(s.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn kd_examples() {
        let z = [0.4, -0.8, 1.9, 0.1, -0.3];
        let uniform_teacher = Tensor::new(vec![1, 5], vec![0.7; 5]).unwrap();
        for alpha in [0.0, 0.1, 0.5, 0.9] {
            let kd = value(|t| {
                let v = logits(t, 1, &z);
                kd_loss(t, v, &uniform_teacher, &[2], alpha, 1.0, false)
            });
            let lsr = value(|t| {
                let v = logits(t, 1, &z);
                lsr_loss(t, v, &[2], alpha)
            });
            assert!((kd - lsr).abs() < 1e-12);
        }

        let teacher = Tensor::new(vec![1, 5], vec![2.0, 0.0, -1.0, 3.0, 0.5]).unwrap();
        let ce = value(|t| {
            let v = logits(t, 1, &z);
            LossSpec::cross_entropy().compute(t, v, &[2], None)
        });
        let kd0 = value(|t| {
            let v = logits(t, 1, &z);
            kd_loss(t, v, &teacher, &[2], 0.0, 20.0, true)
        });
        assert!((ce - kd0).abs() < 1e-15);

        // τ = 1: KD plus α H(p^t) is the cross-entropy against the mixed target.
        let alpha = 0.35;
        let pt = softmax_temperature(&teacher, 1.0).unwrap();
        let kd = value(|t| {
            let v = logits(t, 1, &z);
            kd_loss(t, v, &teacher, &[2], alpha, 1.0, false)
        });
        let mixed = combined_smoothed_target(&[2], &pt, alpha).unwrap();
        let h = value(|t| {
            let v = logits(t, 1, &z);
            let lp = t.log_softmax(v, 1)?;
            cross_entropy(t, &mixed, lp)
        });
        assert!((kd + alpha * entropy(&pt) - h).abs() < 1e-9);

        let mut tape = Tape::new();
        let v = logits(&mut tape, 1, &z);
        assert!(kd_loss(&mut tape, v, &teacher, &[2], 0.5, 0.0, false).is_err());
    }

    #[test]
    fn tau_squared_scaling_scales_only_the_kl_term() {
        let z = [0.4, -0.8, 1.9];
        let teacher = Tensor::new(vec![1, 3], vec![1.0, 0.0, -2.0]).unwrap();
        let (alpha, tau) = (0.5, 4.0);
        let plain = value(|t| {
            let v = logits(t, 1, &z);
            kd_loss(t, v, &teacher, &[0], alpha, tau, false)
        });
        let scaled = value(|t| {
            let v = logits(t, 1, &z);
            kd_loss(t, v, &teacher, &[0], alpha, tau, true)
        });
        let ce = value(|t| {
            let v = logits(t, 1, &z);
            LossSpec::cross_entropy().compute(t, v, &[0], None)
        });
        let kl = (plain - (1.0 - alpha) * ce) / alpha;
        assert!((scaled - ((1.0 - alpha) * ce + alpha * tau * tau * kl)).abs() < 1e-12);
    }

    #[test]
    fn tf_self_examples() {
        let z = [0.4, -0.8, 1.9, 0.2];
        let same = Tensor::new(vec![1, 4], z.to_vec()).unwrap();
        let alpha = 0.6;
        let l = value(|t| {
            let v = logits(t, 1, &z);
            tf_kd_self_loss(t, v, &same, &[1], alpha, 20.0)
        });
        let ce = value(|t| {
            let v = logits(t, 1, &z);
            LossSpec::cross_entropy().compute(t, v, &[1], None)
        });
        assert!((l - (1.0 - alpha) * ce).abs() < 1e-12);

        let teacher = Tensor::new(vec![1, 4], vec![0.3, 0.2, -1.0, 2.2]).unwrap();
        let a = value(|t| {
            let v = logits(t, 1, &z);
            tf_kd_self_loss(t, v, &teacher, &[1], alpha, 6.0)
        });
        let b = value(|t| {
            let v = logits(t, 1, &z);
            kd_loss(t, v, &teacher, &[1], alpha, 6.0, false)
        });
        assert_eq!(a, b);
    }

    #[test]
    fn tf_reg_examples() {
        let z = [0.4, -0.8, 1.9, 0.2];
        let reg = value(|t| {
            let v = logits(t, 1, &z);
            tf_kd_reg_loss(t, v, &[3], 4, 1.0, 1.0, 1.0)
        });
        let ce = value(|t| {
            let v = logits(t, 1, &z);
            LossSpec::cross_entropy().compute(t, v, &[3], None)
        });
        assert!((reg - ce).abs() < 1e-12);

        // Closed form for a two-level teacher against a uniform student.
        let (k, a, tau, alpha) = (10usize, 0.99f64, 20.0f64, 0.1f64);
        let hi = a.powf(1.0 / tau);
        let lo = ((1.0 - a) / (k - 1) as f64).powf(1.0 / tau);
        let z_norm = hi + (k - 1) as f64 * lo;
        let (th, tl) = (hi / z_norm, lo / z_norm);
        let kl = th * (th * k as f64).ln() + (k - 1) as f64 * tl * (tl * k as f64).ln();
        let want = (1.0 - alpha) * (k as f64).ln() + alpha * kl;
        let got = value(|t| {
            let v = logits(t, 1, &[0.0; 10]);
            tf_kd_reg_loss(t, v, &[7], k, alpha, tau, a)
        });
        assert!((got - want).abs() < 1e-12);
        assert!((got - 2.072_946_345_610_242_7).abs() < 1e-12);
    }

    #[test]
    fn loss_spec_validation_and_dispatch() {
        assert!(LossSpec::tf_reg(0.1, 20.0, 0.85).validate(10).is_err());
        assert!(LossSpec::tf_reg(0.1, 20.0, 0.99).validate(10).is_ok());
        assert!(LossSpec::kd(1.2, 20.0).validate(10).is_err());
        assert!(LossSpec::kd(0.5, 0.0).validate(10).is_err());

        let mut tape = Tape::new();
        let v = logits(&mut tape, 1, &[0.1, 0.2, 0.3]);
        assert!(LossSpec::kd(0.5, 2.0).compute(&mut tape, v, &[0], None).is_err());
        let t = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(LossSpec::tf_reg(0.1, 20.0, 0.99).compute(&mut tape, v, &[0], Some(&t)).is_err());
    }

    #[test]
    fn batched_losses_are_row_means() {
        let z = [0.4, -0.8, 1.9, 1.0, 0.0, -1.0];
        let both = value(|t| {
            let v = logits(t, 2, &z);
            lsr_loss(t, v, &[2, 0], 0.2)
        });
        let a = value(|t| {
            let v = logits(t, 1, &z[..3]);
            lsr_loss(t, v, &[2], 0.2)
        });
        let b = value(|t| {
            let v = logits(t, 1, &z[3..]);
            lsr_loss(t, v, &[0], 0.2)
        });
        assert!((both - 0.5 * (a + b)).abs() < 1e-14);
    }

    #[test]
    fn closed_form_softened_virtual_teacher() {
        let labels = [0, 4, 2, 4];
        for a in [0.9, 0.99, 1.0] {
            for tau in [1.0, 20.0, 40.0] {
                let fast = softened_virtual_teacher(&labels, 5, a, tau).unwrap();
                let slow = soften_distribution(&virtual_teacher(&labels, 5, a).unwrap(), tau).unwrap();
                for (x, y) in fast.probs().iter().zip(slow.probs()) {
                    assert!((x - y).abs() < 1e-15, "a={a} tau={tau}: {x} vs {y}");
                }
            }
        }
        assert!(softened_virtual_teacher(&[5], 5, 0.9, 1.0).is_err());
        assert!(softened_virtual_teacher(&[], 5, 0.9, 1.0).is_err());
    }
}