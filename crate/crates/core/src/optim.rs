//! SGD with heavy-ball momentum and weight decay, plus step schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimSpec {
    /// lr 0.1, momentum 0.9, weight decay 5e-4, no milestones.
    fn default() -> Self {
        OptimSpec {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            decay_factor: 0.2,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("optimizer: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self, epoch)
    }
}

/// `lr0 · decay_factor^(number of milestones ≤ epoch)`.
pub fn lr_at_epoch(spec: &OptimSpec, epoch: usize) -> f64 {
    let passed = spec.milestones.iter().filter(|&&m| m <= epoch).count();
    spec.lr0 * spec.decay_factor.powi(passed as i32)
}

/// Linear scaling rule: `lr_base · batch_size / ref_batch`.
pub fn batch_scaled_lr(lr_base: f64, batch_size: usize, ref_batch: usize) -> Result<f64> {
    if batch_size == 0 || ref_batch == 0 {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    Ok(lr_base * batch_size as f64 / ref_batch as f64)
}

/// One in-place update of a single parameter buffer:
/// `g' = grad + wd·param; v ← momentum·v + g'; param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        let nv = momentum * *v + g;
        let np = *p - lr * nv;
        if !np.is_finite() || !nv.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        *v = nv;
        *p = np;
    }
    Ok(())
}

/// Momentum state for a list of parameter tensors. Velocities start at zero.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn from_spec(params: &[Tensor], spec: &OptimSpec) -> Self {
        Sgd::new(params, spec.momentum, spec.weight_decay)
    }

    /// Updates every parameter from its accumulated gradient. Parameters
    /// without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd",
                format!("optimizer holds {} buffers, got {} params", self.velocity.len(), params.len()),
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            };
            sgd_step(p.data_mut(), &grad, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-15 * b.abs().max(1.0)
    }

    #[test]
    fn vanilla_step() {
        let (mut p, mut v) = ([1.0], [0.0]);
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!(close(p[0], 0.95));
    }

    #[test]
    fn zero_grad_leaves_params() {
        let (mut p, mut v) = ([1.5, -2.0], [0.0, 0.0]);
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let (g, lr) = (0.3, 0.05);
        let (mut p, mut v) = ([0.0], [0.0]);
        for _ in 0..2 {
            sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        }
        assert!(close(-p[0], lr * g * (1.0 + 1.9)));
    }

    #[test]
    fn weight_decay_term() {
        let (mut p, mut v) = ([2.0], [0.0]);
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!(close(p[0], 2.0 - 0.1 * 0.5 * 2.0));
    }

    #[test]
    fn step_errors() {
        let (mut p, mut v) = ([1.0], [0.0]);
        assert!(sgd_step(&mut p, &[1.0, 2.0], &mut v, 0.1, 0.0, 0.0).is_err());
        assert!(matches!(
            sgd_step(&mut p, &[f64::MAX], &mut v, 1e10, 0.0, 0.0),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(p, [1.0]);
    }

    #[test]
    fn schedule_examples() {
        let spec = OptimSpec {
            milestones: vec![60, 120, 160],
            ..OptimSpec::default()
        };
        assert!(close(lr_at_epoch(&spec, 0), 0.1));
        assert!(close(lr_at_epoch(&spec, 59), 0.1));
        assert!(close(lr_at_epoch(&spec, 60), 0.02));
        assert!(close(lr_at_epoch(&spec, 120), 0.004));
        assert!(close(lr_at_epoch(&spec, 199), 0.0008));

        let tiny = OptimSpec {
            decay_factor: 0.1,
            ..spec.clone()
        };
        assert!(close(lr_at_epoch(&tiny, 60), 0.01));

        let flat = OptimSpec::default();
        assert!((0..300).all(|e| lr_at_epoch(&flat, e) == 0.1));
    }

    #[test]
    fn batch_scaling() {
        assert!(close(batch_scaled_lr(0.1, 128, 128).unwrap(), 0.1));
        assert!(close(batch_scaled_lr(0.1, 64, 128).unwrap(), 0.05));
        assert!(close(batch_scaled_lr(0.1, 256, 256).unwrap(), 0.1));
        assert!(batch_scaled_lr(0.1, 0, 128).is_err());
    }

    #[test]
    fn validation() {
        assert!(OptimSpec::default().validate().is_ok());
        let bad = [
            OptimSpec { lr0: 0.0, ..OptimSpec::default() },
            OptimSpec { momentum: 1.0, ..OptimSpec::default() },
            OptimSpec { weight_decay: -1e-4, ..OptimSpec::default() },
            OptimSpec { milestones: vec![20, 20], ..OptimSpec::default() },
            OptimSpec { decay_factor: 0.0, ..OptimSpec::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn optimizer_uses_accumulated_grads() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad()];
        params[0].accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut opt = Sgd::new(&params, 0.0, 0.0);
        opt.step(&mut params, 0.5).unwrap();
        assert_eq!(params[0].data(), &[0.5, 2.5]);
    }
}
