//! Desk-scale classifiers: multilayer perceptrons and a three-conv "plain
//! CNN", with deterministic He-normal initialization.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};

use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Layer layout, independent of input size and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected ReLU network with the given hidden widths. No hidden
    /// layers means a single linear map.
    Mlp { hidden: Vec<usize> },
    /// conv3x3(c1) → ReLU → pool → conv3x3(c2) → ReLU → pool →
    /// conv3x3(c3) → ReLU → pool → fc(hidden) → ReLU → fc(K).
    PlainCnn { channels: [usize; 3], hidden: usize },
}

impl Architecture {
    /// Student-sized MLP.
    pub fn small_mlp() -> Self {
        Architecture::Mlp { hidden: vec![256] }
    }

    /// Teacher-sized MLP.
    pub fn large_mlp() -> Self {
        Architecture::Mlp { hidden: vec![1024, 512] }
    }

    pub fn plain_cnn_mini() -> Self {
        Architecture::PlainCnn {
            channels: [8, 16, 32],
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub arch: Architecture,
    /// Per-example input shape: `[D]` (or any shape, flattened) for MLPs,
    /// `[C, H, W]` for the CNN.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelDescriptor {
    pub fn new(arch: Architecture, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let d = ModelDescriptor {
            arch,
            input_shape,
            num_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model descriptor: {m}")));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("invalid input shape {:?}", self.input_shape));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad(format!("zero width in {hidden:?}"));
                }
            }
            Architecture::PlainCnn { channels, hidden } => {
                if channels.contains(&0) || *hidden == 0 {
                    return bad("zero channel count or hidden width".into());
                }
                match self.input_shape.as_slice() {
                    [_, h, w] if *h >= 8 && *w >= 8 => {}
                    s => return bad(format!("plain CNN needs [C, H>=8, W>=8] input, got {s:?}")),
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Vec<usize>)>, i: usize, fan_in: usize, width: usize| {
            out.push((format!("fc{i}.weight"), vec![fan_in, width]));
            out.push((format!("fc{i}.bias"), vec![width]));
        };
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut widths = vec![self.input_len()];
                widths.extend(hidden);
                widths.push(self.num_classes);
                for (i, pair) in widths.windows(2).enumerate() {
                    linear(&mut out, i, pair[0], pair[1]);
                }
            }
            Architecture::PlainCnn { channels, hidden } => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let mut c_in = c;
                for (i, &c_out) in channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![c_out, c_in, 3, 3]));
                    out.push((format!("conv{i}.bias"), vec![c_out]));
                    c_in = c_out;
                }
                let flat = channels[2] * (h / 8) * (w / 8);
                linear(&mut out, 0, flat, *hidden);
                linear(&mut out, 1, *hidden, self.num_classes);
            }
        }
        out
    }
}

/// Parameter handles of a model bound to one tape.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    descriptor: ModelDescriptor,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Builds a model with weights drawn from `Normal(0, sqrt(2 / fan_in))`
    /// and zero biases. The same `(descriptor, seed)` always yields
    /// bit-identical parameters.
    pub fn build(descriptor: &ModelDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in descriptor.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(Model {
            descriptor: descriptor.clone(),
            names,
            params,
        })
    }

    pub(crate) fn from_parts(descriptor: ModelDescriptor, params: Vec<Tensor>) -> Result<Self> {
        let shapes = descriptor.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("descriptor has {} parameters, got {}", shapes.len(), params.len()),
            ));
        }
        let mut names = Vec::with_capacity(params.len());
        let mut tensors = Vec::with_capacity(params.len());
        for ((name, shape), p) in shapes.into_iter().zip(params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("{name}: expected {shape:?}, got {:?}", p.shape()),
                ));
            }
            names.push(name);
            tensors.push(p.with_grad());
        }
        Ok(Model {
            descriptor,
            names,
            params: tensors,
        })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        crate::tensor::zero_grad(self.params.iter_mut());
    }

    /// Records the parameters on `tape` as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(p)).collect())
    }

    /// Records the parameters as constants; nothing downstream is tracked.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<ParamVars> {
        self.params
            .iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.data().to_vec()))
            .collect::<Result<_>>()
            .map(ParamVars)
    }

    /// Adds the gradients of bound parameters into their buffers.
    pub fn accumulate_grads(&mut self, bound: &ParamVars, grads: &Gradients) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    /// Logits `[N, K]` for a batch `[N, ...input_shape]`.
    pub fn forward(&self, tape: &mut Tape, bound: &ParamVars, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != self.descriptor.input_shape.len() + 1
            || shape[1..] != self.descriptor.input_shape[..]
        {
            return Err(Error::shape(
                "forward",
                format!("batch {shape:?} does not match input shape {:?}", self.descriptor.input_shape),
            ));
        }
        let n = shape[0];
        let p = &bound.0;
        match &self.descriptor.arch {
            Architecture::Mlp { hidden } => {
                let mut x = tape.reshape(input, vec![n, self.descriptor.input_len()])?;
                let layers = hidden.len() + 1;
                for i in 0..layers {
                    x = linear(tape, x, p[2 * i], p[2 * i + 1])?;
                    if i + 1 < layers {
                        x = tape.relu(x)?;
                    }
                }
                Ok(x)
            }
            Architecture::PlainCnn { .. } => {
                let mut x = input;
                for i in 0..3 {
                    x = tape.conv2d(x, p[2 * i])?;
                    let s = tape.shape(x).to_vec();
                    let b = tape.reshape(p[2 * i + 1], vec![s[1], 1, 1])?;
                    let b = tape.broadcast_to(b, s)?;
                    x = tape.add(x, b)?;
                    x = tape.relu(x)?;
                    x = tape.maxpool2x2(x)?;
                }
                let flat: usize = tape.shape(x)[1..].iter().product();
                x = tape.reshape(x, vec![n, flat])?;
                x = linear(tape, x, p[6], p[7])?;
                x = tape.relu(x)?;
                linear(tape, x, p[8], p[9])
            }
        }
    }

    /// Logits for a batch without recording gradients.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let x = tape.leaf(batch);
        let logits = self.forward(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(logits))
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y).to_vec();
    let bias = tape.broadcast_to(b, shape)?;
    tape.add(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_entropy, Distribution};
    use crate::tensor::{compare_gradients, finite_diff_gradient};

    fn mlp(hidden: Vec<usize>, input: usize, k: usize) -> ModelDescriptor {
        ModelDescriptor::new(Architecture::Mlp { hidden }, vec![input], k).unwrap()
    }

    #[test]
    fn descriptor_validation() {
        assert!(ModelDescriptor::new(Architecture::small_mlp(), vec![4], 1).is_err());
        assert!(ModelDescriptor::new(Architecture::Mlp { hidden: vec![0] }, vec![4], 3).is_err());
        assert!(ModelDescriptor::new(Architecture::plain_cnn_mini(), vec![1, 4, 4], 3).is_err());
        assert!(ModelDescriptor::new(Architecture::plain_cnn_mini(), vec![1, 8, 8], 3).is_ok());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let d = mlp(vec![16], 8, 3);
        assert_eq!(Model::build(&d, 5).unwrap(), Model::build(&d, 5).unwrap());
        assert_ne!(Model::build(&d, 5).unwrap(), Model::build(&d, 6).unwrap());
        let m = Model::build(&d, 5).unwrap();
        let names: Vec<_> = m.named_params().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]);
        assert!(m.params()[1].data().iter().all(|&b| b == 0.0));
        assert_eq!(m.num_params(), 8 * 16 + 16 + 16 * 3 + 3);
    }

    #[test]
    fn he_normal_scale() {
        // 1000 fan-in × 1000 outputs = 10^6 samples.
        let d = mlp(vec![], 1000, 1000);
        let m = Model::build(&d, 11).unwrap();
        let w = m.params()[0].data();
        assert_eq!(w.len(), 1_000_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 0.002f64.sqrt();
        assert!((var.sqrt() - want).abs() < 0.1 * want, "std {}", var.sqrt());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let d = mlp(vec![5], 3, 4);
        let mut m = Model::build(&d, 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let d = mlp(vec![], 3, 2);
        let mut m = Model::build(&d, 0).unwrap();
        m.params_mut()[1].data_mut().copy_from_slice(&[0.5, -1.0]);
        let w = m.params()[0].data().to_vec();
        let x = [1.0, 2.0, -1.0];
        let y = m.predict(&Tensor::new(vec![1, 3], x.to_vec()).unwrap()).unwrap();
        for j in 0..2 {
            let want: f64 = (0..3).map(|i| x[i] * w[i * 2 + j]).sum::<f64>() + [0.5, -1.0][j];
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = Model::build(&mlp(vec![4], 3, 2), 0).unwrap();
        assert!(m.predict(&Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap()).is_err());
    }

    /// Hand-unrolled forward pass of the plain CNN on a delta input: the
    /// convolution is written as an explicit sum over kernel taps.
    fn cnn_oracle(m: &Model, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let p: Vec<&[f64]> = m.params().iter().map(Tensor::data).collect();
        let Architecture::PlainCnn { channels, hidden } = m.descriptor().arch.clone() else { unreachable!() };
        let mut act = input.to_vec();
        let (mut c_in, mut hh, mut ww) = (1usize, h, w);
        for (layer, &c_out) in channels.iter().enumerate() {
            let (k, b) = (p[2 * layer], p[2 * layer + 1]);
            let mut conv = vec![0.0; c_out * hh * ww];
            for o in 0..c_out {
                for y in 0..hh {
                    for x in 0..ww {
                        let mut s = b[o];
                        for c in 0..c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < hh && (sx as usize) < ww {
                                        s += k[((o * c_in + c) * 3 + ky) * 3 + kx]
                                            * act[(c * hh + sy as usize) * ww + sx as usize];
                                    }
                                }
                            }
                        }
                        conv[(o * hh + y) * ww + x] = s.max(0.0);
                    }
                }
            }
            let (ph, pw) = (hh / 2, ww / 2);
            let mut pooled = vec![0.0; c_out * ph * pw];
            for o in 0..c_out {
                for y in 0..ph {
                    for x in 0..pw {
                        let at = |dy: usize, dx: usize| conv[(o * hh + 2 * y + dy) * ww + 2 * x + dx];
                        pooled[(o * ph + y) * pw + x] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            act = pooled;
            c_in = c_out;
            hh = ph;
            ww = pw;
        }
        let dense = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
        };
        let hid: Vec<f64> = dense(&act, p[6], p[7], hidden).into_iter().map(|v| v.max(0.0)).collect();
        dense(&hid, p[8], p[9], m.num_classes())
    }

    #[test]
    fn cnn_matches_unrolled_oracle_on_delta_input() {
        let d = ModelDescriptor::new(
            Architecture::PlainCnn { channels: [3, 4, 5], hidden: 6 },
            vec![1, 8, 8],
            3,
        )
        .unwrap();
        let mut m = Model::build(&d, 9).unwrap();
        // Non-zero biases so every layer contributes.
        for i in [1, 3, 5, 7, 9] {
            let n = m.params()[i].len();
            m.params_mut()[i].data_mut().copy_from_slice(&(0..n).map(|j| 0.05 * (j as f64 + 1.0)).collect::<Vec<_>>());
        }
        let mut input = vec![0.0; 64];
        input[3 * 8 + 5] = 1.0;
        let y = m.predict(&Tensor::new(vec![1, 1, 8, 8], input.clone()).unwrap()).unwrap();
        let want = cnn_oracle(&m, &input, 8, 8);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn ce_of(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape)?;
        let xv = tape.leaf(x);
        let logits = model.forward(&mut tape, &bound, xv)?;
        let lp = tape.log_softmax(logits, 1)?;
        let q = Distribution::one_hot(labels, model.num_classes())?;
        let l = cross_entropy(&mut tape, &q, lp)?;
        tape.scalar(l)
    }

    fn check_param_grads(model: &mut Model, x: &Tensor, labels: &[usize]) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(x);
        let logits = model.forward(&mut tape, &bound, xv).unwrap();
        let lp = tape.log_softmax(logits, 1).unwrap();
        let q = Distribution::one_hot(labels, model.num_classes()).unwrap();
        let l = cross_entropy(&mut tape, &q, lp).unwrap();
        let grads = tape.backward(l).unwrap();
        model.accumulate_grads(&bound, &grads).unwrap();
        for i in 0..model.params().len() {
            let base = model.clone();
            let fd = finite_diff_gradient(
                |p| {
                    let mut m = base.clone();
                    m.params_mut()[i].data_mut().copy_from_slice(p.data());
                    ce_of(&m, x, labels)
                },
                &model.params()[i],
                1e-5,
            )
            .unwrap();
            let c = compare_gradients(model.params()[i].grad().unwrap(), fd.data(), 1e-4, 1e-8);
            assert!(c.passed, "param {i}: {c:?}");
        }
    }

    #[test]
    fn mlp_parameter_gradients_match_finite_differences() {
        let d = mlp(vec![7, 5], 4, 3);
        let mut m = Model::build(&d, 21).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap();
        check_param_grads(&mut m, &x, &[0, 2, 1]);
    }

    #[test]
    fn cnn_parameter_gradients_match_finite_differences() {
        let d = ModelDescriptor::new(
            Architecture::PlainCnn { channels: [2, 3, 2], hidden: 4 },
            vec![1, 8, 8],
            3,
        )
        .unwrap();
        let mut m = Model::build(&d, 4).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        check_param_grads(&mut m, &x, &[1, 2]);
    }
}
