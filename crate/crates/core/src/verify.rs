//! Self-checks backing the `gradcheck` and `verify-identities` commands.
//!
//! Identities compare two independently computed forms of the same
//! quantity on random cases; gradient checks compare tape gradients with
//! central finite differences.

use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::Result;
use crate::losses::{
    combined_smoothed_target, cross_entropy, entropy, kd_loss, kl_divergence, log_softmax_temperature,
    lsr_loss, smoothed_labels, soften_distribution, softmax_temperature, virtual_teacher, Distribution,
    LossSpec,
};
use crate::nn::{Architecture, Model, ModelDescriptor};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::{compare_gradients, finite_diff_gradient, Tape, Tensor};

/// Class counts used by the identity suite.
pub const IDENTITY_CLASSES: [usize; 4] = [2, 5, 10, 100];
/// Temperatures along which `KL(u, p_τ)` must not increase.
pub const CONVERGENCE_TAUS: [f64; 7] = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1000.0];

pub const LOSS_GRAD_RTOL: f64 = 1e-5;
pub const NET_GRAD_RTOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    /// Largest observed error (absolute for identities, relative for gradients).
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<36} cases={:<5} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_err,
            self.tolerance
        )
    }
}

struct Case {
    k: usize,
    logits: Tensor,
    teacher: Tensor,
    labels: Vec<usize>,
    alpha: f64,
}

/// `per_k` random cases for each class count: 1–4 rows, logits with
/// standard deviation 4, α uniform in [0, 1].
fn cases(per_k: usize, seed: u64) -> Vec<Case> {
    let mut rng = rng_from_seed(derive_seed(seed, "verify/cases"));
    let mut out = Vec::with_capacity(per_k * IDENTITY_CLASSES.len());
    for &k in &IDENTITY_CLASSES {
        for _ in 0..per_k {
            let n = rng.random_range(1..=4);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..n * k)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        4.0 * z
                    })
                    .collect();
                Tensor::new(vec![n, k], v).expect("shape matches data")
            };
            let logits = draw(&mut rng);
            let teacher = draw(&mut rng);
            let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
            let alpha = rng.random_range(0.0..=1.0);
            out.push(Case {
                k,
                logits,
                teacher,
                labels,
                alpha,
            });
        }
    }
    out
}

fn finish(name: &str, cases: usize, max_err: f64, tolerance: f64) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        cases,
        max_err,
        tolerance,
        passed: max_err <= tolerance,
    }
}

fn loss_value(f: impl FnOnce(&mut Tape) -> Result<crate::tensor::Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    tape.scalar(v)
}

/// `H(q', p) = (1-α) H(q, p) + α (KL(u, p) + H(u))`.
pub fn lsr_decomposition(per_k: usize, seed: u64) -> Result<CheckReport> {
    let all = cases(per_k, seed);
    let mut max_err: f64 = 0.0;
    for c in &all {
        let n = c.labels.len();
        let direct = loss_value(|t| {
            let q = smoothed_labels(&c.labels, c.k, c.alpha)?;
            let lp = t.leaf(&c.logits);
            let lp = t.log_softmax(lp, 1)?;
            cross_entropy(t, &q, lp)
        })?;
        let ce = loss_value(|t| {
            let q = Distribution::one_hot(&c.labels, c.k)?;
            let lp = t.leaf(&c.logits);
            let lp = t.log_softmax(lp, 1)?;
            cross_entropy(t, &q, lp)
        })?;
        let u = Distribution::uniform(n, c.k)?;
        let kl = loss_value(|t| {
            let lp = t.leaf(&c.logits);
            let lp = t.log_softmax(lp, 1)?;
            kl_divergence(t, &u, lp)
        })?;
        let decomposed = (1.0 - c.alpha) * ce + c.alpha * (kl + entropy(&u));
        max_err = max_err.max((direct - decomposed).abs());
    }
    Ok(finish("lsr decomposition", all.len(), max_err, 1e-9))
}

/// `kd_loss(τ=1) + α H(p^t) = H((1-α) q + α p^t, p)`.
pub fn kd_as_learned_lsr(per_k: usize, seed: u64) -> Result<CheckReport> {
    let all = cases(per_k, seed);
    let mut max_err: f64 = 0.0;
    for c in &all {
        let pt = softmax_temperature(&c.teacher, 1.0)?;
        let kd = loss_value(|t| {
            let z = t.leaf(&c.logits);
            kd_loss(t, z, &c.teacher, &c.labels, c.alpha, 1.0, false)
        })?;
        let direct = loss_value(|t| {
            let q = combined_smoothed_target(&c.labels, &pt, c.alpha)?;
            let lp = t.leaf(&c.logits);
            let lp = t.log_softmax(lp, 1)?;
            cross_entropy(t, &q, lp)
        })?;
        max_err = max_err.max((kd + c.alpha * entropy(&pt) - direct).abs());
    }
    Ok(finish("kd as learned lsr (tau=1)", all.len(), max_err, 1e-9))
}

/// LSR equals KD from a teacher with constant logits at `τ = 1`.
pub fn lsr_equals_uniform_kd(per_k: usize, seed: u64) -> Result<CheckReport> {
    let all = cases(per_k, seed);
    let mut max_err: f64 = 0.0;
    for c in &all {
        let flat = Tensor::zeros(c.logits.shape().to_vec())?;
        let lsr = loss_value(|t| {
            let z = t.leaf(&c.logits);
            lsr_loss(t, z, &c.labels, c.alpha)
        })?;
        let kd = loss_value(|t| {
            let z = t.leaf(&c.logits);
            kd_loss(t, z, &flat, &c.labels, c.alpha, 1.0, false)
        })?;
        max_err = max_err.max((lsr - kd).abs());
    }
    Ok(finish("lsr == kd with uniform teacher", all.len(), max_err, 1e-12))
}

/// `KL(u, p_τ)` for a single logit row.
pub fn kl_uniform_softened(logits: &[f64], tau: f64) -> Result<f64> {
    let k = logits.len();
    let lp = log_softmax_temperature(&Tensor::from_vec(logits.to_vec())?, tau)?;
    let ln_k = (k as f64).ln();
    Ok(lp.iter().map(|l| (-ln_k - l) / k as f64).sum())
}

/// `KL(u, p_τ)` is nonincreasing along [`CONVERGENCE_TAUS`] and below 1e-4
/// at the largest τ, for random logits with `|z| <= 10`. Reports the largest
/// increase between consecutive temperatures (0 when monotone).
pub fn temperature_convergence(vectors: usize, classes: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "verify/temperature"));
    let mut worst_increase: f64 = 0.0;
    let mut worst_tail: f64 = 0.0;
    for _ in 0..vectors {
        let z: Vec<f64> = (0..classes).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let kls = CONVERGENCE_TAUS
            .iter()
            .map(|&t| kl_uniform_softened(&z, t))
            .collect::<Result<Vec<_>>>()?;
        for w in kls.windows(2) {
            worst_increase = worst_increase.max(w[1] - w[0]);
        }
        worst_tail = worst_tail.max(*kls.last().expect("nonempty temperature list"));
    }
    let mut r = finish("temperature convergence", vectors, worst_increase, 0.0);
    r.passed &= worst_tail < 1e-4;
    Ok(r)
}

/// The softened virtual teacher puts its maximum on the label for every
/// label, every `a` in {0.9, 0.99, 1} and every τ in {1, 20, 40}. Reports
/// the number of violations.
pub fn virtual_teacher_accuracy() -> Result<CheckReport> {
    let mut checked = 0;
    let mut violations = 0;
    for &k in &IDENTITY_CLASSES {
        let labels: Vec<usize> = (0..k).collect();
        for a in [0.9, 0.99, 1.0] {
            for tau in [1.0, 20.0, 40.0] {
                let p = soften_distribution(&virtual_teacher(&labels, k, a)?, tau)?;
                for (r, &y) in labels.iter().enumerate() {
                    checked += 1;
                    let row = p.row(r);
                    let top = row.iter().enumerate().all(|(i, &v)| i == y || v < row[y]);
                    if !top {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(finish("virtual teacher accuracy", checked, violations as f64, 0.0))
}

/// Identity suite with `per_k` random cases per class count.
pub fn identity_suite(per_k: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        lsr_decomposition(per_k, seed)?,
        kd_as_learned_lsr(per_k, seed)?,
        lsr_equals_uniform_kd(per_k, seed)?,
        temperature_convergence(100, 10, seed)?,
        virtual_teacher_accuracy()?,
    ])
}

/// The losses checked against finite differences, by name.
pub fn gradcheck_losses() -> Vec<(&'static str, LossSpec)> {
    vec![
        ("ce", LossSpec::cross_entropy()),
        ("lsr", LossSpec::lsr(0.3)),
        ("kd", LossSpec::kd(0.7, 4.0)),
        ("kd tau^2", LossSpec::kd(0.7, 4.0).with_tau_squared_scaling(true)),
        ("tf-self", LossSpec::tf_self(0.95, 20.0)),
        ("tf-reg", LossSpec::tf_reg(0.1, 20.0, 0.99)),
    ]
}

/// Gradient of every loss with respect to the student logits.
pub fn loss_gradients(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = rng_from_seed(derive_seed(seed, "verify/loss-grad"));
    let (n, k) = (4, 5);
    let mut draw = || -> Result<Tensor> {
        let v = (0..n * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                2.0 * z
            })
            .collect::<Vec<f64>>();
        Tensor::new(vec![n, k], v)
    };
    let z = draw()?.with_grad();
    let teacher = draw()?;
    let labels = [0, 3, 1, 4];

    let mut out = Vec::new();
    for (name, spec) in gradcheck_losses() {
        let t_logits = spec.needs_teacher().then_some(&teacher);
        let mut tape = Tape::new();
        let zv = tape.leaf(&z);
        let l = spec.compute(&mut tape, zv, &labels, t_logits)?;
        let grads = tape.backward(l)?;
        let analytic = grads.get(zv).expect("logits require grad").to_vec();
        let numeric = finite_diff_gradient(
            |x| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x);
                let l = spec.compute(&mut tape, xv, &labels, t_logits)?;
                tape.scalar(l)
            },
            &z,
            1e-5,
        )?;
        let c = compare_gradients(&analytic, numeric.data(), LOSS_GRAD_RTOL, GRAD_FLOOR);
        out.push(CheckReport {
            name: format!("d loss/d logits: {name}"),
            cases: analytic.len(),
            max_err: c.max_rel_err,
            tolerance: LOSS_GRAD_RTOL,
            passed: c.passed,
        });
    }
    Ok(out)
}

fn network_loss(model: &Model, x: &Tensor, labels: &[usize], spec: &LossSpec, teacher: Option<&Tensor>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape)?;
    let xv = tape.leaf(x);
    let logits = model.forward(&mut tape, &bound, xv)?;
    let l = spec.compute(&mut tape, logits, labels, teacher)?;
    tape.scalar(l)
}

fn network_gradient(name: &str, desc: &ModelDescriptor, x: &Tensor, labels: &[usize], seed: u64) -> Result<CheckReport> {
    let mut model = Model::build(desc, seed)?;
    // Zero biases put every unit of an all-dead row exactly on the ReLU
    // kink, where central differences and the subgradient disagree.
    let mut rng = rng_from_seed(derive_seed(seed, "verify/bias"));
    let bias_idx: Vec<usize> = model
        .named_params()
        .enumerate()
        .filter(|(_, (n, _))| n.ends_with(".bias"))
        .map(|(i, _)| i)
        .collect();
    for i in bias_idx {
        for b in model.params_mut()[i].data_mut() {
            let m = rng.random_range(0.05..0.5);
            *b = if rng.random_bool(0.5) { m } else { -m };
        }
    }
    // KD through the network exercises both loss terms.
    let spec = LossSpec::kd(0.5, 3.0);
    let teacher = Model::build(desc, seed ^ 1)?.predict(x)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let logits = model.forward(&mut tape, &bound, xv)?;
    let l = spec.compute(&mut tape, logits, labels, Some(&teacher))?;
    let grads = tape.backward(l)?;
    model.accumulate_grads(&bound, &grads)?;

    let mut worst: f64 = 0.0;
    let mut passed = true;
    let mut coords = 0;
    for i in 0..model.params().len() {
        let loss_at = |p: &Tensor| {
            let mut m = model.clone();
            m.params_mut()[i].data_mut().copy_from_slice(p.data());
            network_loss(&m, x, labels, &spec, Some(&teacher))
        };
        let mut numeric = finite_diff_gradient(loss_at, &model.params()[i], 1e-5)?.into_data();
        let analytic = model.params()[i].grad().expect("parameters require grad");
        // A ReLU or max-pool kink closer than the step skews the difference;
        // mismatching coordinates are measured again with a finer step.
        let fine = finite_diff_gradient(loss_at, &model.params()[i], 1e-7)?;
        for (j, n) in numeric.iter_mut().enumerate() {
            if !compare_gradients(&analytic[j..=j], &[*n], NET_GRAD_RTOL, GRAD_FLOOR).passed {
                *n = fine.data()[j];
            }
        }
        let c = compare_gradients(analytic, &numeric, NET_GRAD_RTOL, GRAD_FLOOR);
        worst = worst.max(c.max_rel_err);
        passed &= c.passed;
        coords += analytic.len();
    }
    Ok(CheckReport {
        name: format!("d loss/d params: {name}"),
        cases: coords,
        max_err: worst,
        tolerance: NET_GRAD_RTOL,
        passed,
    })
}

/// Parameter gradients of each architecture family, on small instances.
pub fn network_gradients(seed: u64) -> Result<Vec<CheckReport>> {
    let mlp = ModelDescriptor::new(Architecture::Mlp { hidden: vec![7, 5] }, vec![6], 4)?;
    let x = Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64 * 0.71).sin()).collect())?;
    let cnn = ModelDescriptor::new(
        Architecture::PlainCnn {
            channels: [2, 3, 2],
            hidden: 4,
        },
        vec![1, 8, 8],
        3,
    )?;
    let xc = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect())?;
    Ok(vec![
        network_gradient("mlp", &mlp, &x, &[0, 3, 1], seed)?,
        network_gradient("plain-cnn", &cnn, &xc, &[2, 0], seed)?,
    ])
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = loss_gradients(seed)?;
    out.extend(network_gradients(seed)?);
    Ok(out)
}
