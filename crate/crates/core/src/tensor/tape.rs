use super::gemm::gemm;
use super::{check_finite, log_softmax_rows, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum { input: Var, axis: usize },
    SumAll(Var),
    Mean { input: Var, axis: usize },
    Max { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    BroadcastTo(Var),
    LogSoftmax { input: Var, axis: usize },
    Conv2d { input: Var, kernel: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    /// `dz` is the gradient of the scalar output, filled in on the forward pass.
    SoftmaxXent { input: Var, dz: Vec<f64> },
}

/// One term `weight · H(target, softmax(z / tau))` of
/// [`Tape::softmax_cross_entropy_mix`]. `target` is a constant `[N, K]`
/// matrix.
#[derive(Debug, Clone, Copy)]
pub struct XentTerm<'a> {
    pub weight: f64,
    pub target: &'a [f64],
    pub tau: f64,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for a single backward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target`'s gradient buffer. Leaves
    /// that received no gradient contribute zeros.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// A broadcast as a sequence of contiguous output blocks of length `block`.
/// Block `b` starts at source offset `starts[b]`; with `copy` it reads
/// `block` consecutive source values, otherwise it repeats a single one.
struct BroadcastPlan {
    block: usize,
    copy: bool,
    starts: Vec<usize>,
}

fn broadcast_plan(from: &[usize], to: &[usize]) -> Result<BroadcastPlan> {
    if from.len() > to.len() {
        return Err(Error::shape(
            "broadcast_to",
            format!("cannot broadcast {from:?} to lower rank {to:?}"),
        ));
    }
    let pad = to.len() - from.len();
    let ext: Vec<usize> = std::iter::repeat(1).take(pad).chain(from.iter().copied()).collect();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for d in (0..to.len()).rev() {
        if ext[d] == to[d] {
            src_strides[d] = stride;
        } else if ext[d] != 1 {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot broadcast {from:?} to {to:?}"),
            ));
        }
        stride *= ext[d];
    }
    // Trailing dims that are all copied, or all repeated, form one block.
    let copy = to.iter().zip(&ext).rev().find(|(t, _)| **t != 1).map_or(true, |(t, e)| t == e);
    let mut split = to.len();
    while split > 0 {
        let d = split - 1;
        let fits = to[d] == 1 || if copy { ext[d] == to[d] } else { ext[d] == 1 };
        if !fits {
            break;
        }
        split = d;
    }
    let block = numel(&to[split..]);
    let outer = &to[..split];
    let mut starts = Vec::with_capacity(numel(outer));
    let mut idx = vec![0usize; split];
    for _ in 0..numel(outer) {
        starts.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..split).rev() {
            idx[d] += 1;
            if idx[d] < outer[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(BroadcastPlan { block, copy, starts })
}

fn conv_dims(input: &[usize], kernel: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected [N,C,H,W] input and [O,C,k,k] kernel, got {input:?} and {kernel:?}"),
        ));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c || kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel:?} incompatible with input {input:?} (odd square kernel, matching channels)"),
        ));
    }
    Ok((n, c, h, w, o, kh))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a copy of `t`. It participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// The value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() != 1 {
            return Err(Error::shape("scalar", format!("node has shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    fn unary(&mut self, op: &'static str, a: Var, data: Vec<f64>, rec: Op) -> Result<Var> {
        check_finite(op, &data)?;
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, data, rg, rec))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(op, &data)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, data, rg, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.node(a).data.iter().map(|x| x * s).collect();
        self.unary("scale", a, data, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Matrix product of a `[m, k]` and a `[k, n]` operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).data, false, &self.node(b).data, false, 0.0, &mut out);
        check_finite("matmul", &out)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.node(a).data.iter().map(|&x| x.max(0.0)).collect();
        self.unary("relu", a, data, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.node(a).data.iter().map(|x| x.exp()).collect();
        self.unary("exp", a, data, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let src = &self.node(a).data;
        if let Some((index, &value)) = src.iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(Error::LogDomain { index, value });
        }
        let data = src.iter().map(|x| x.ln()).collect();
        self.unary("log", a, data, Op::Log(a))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce("sum", a, axis, false)?;
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, data, rg, Op::Sum { input: a, axis }))
    }

    /// Averages over `axis`, removing it from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (data, shape) = self.reduce("mean", a, axis, true)?;
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, data, rg, Op::Mean { input: a, axis }))
    }

    fn reduce(&self, op: &'static str, a: Var, axis: usize, average: bool) -> Result<(Vec<f64>, Vec<usize>)> {
        let node = self.node(a);
        let (outer, len, inner) = split_axis(op, &node.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += node.data[base + i];
                }
            }
        }
        if average {
            let d = len as f64;
            out.iter_mut().for_each(|v| *v /= d);
        }
        check_finite(op, &out)?;
        Ok((out, without_axis(&node.shape, axis)))
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.node(a).data.iter().sum();
        check_finite("sum_all", &[s])?;
        let rg = self.node(a).requires_grad;
        Ok(self.push(Vec::new(), vec![s], rg, Op::SumAll(a)))
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let node = self.node(a);
        let (outer, len, inner) = split_axis("max", &node.shape, axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = node.data[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let shape = without_axis(&node.shape, axis);
        let rg = node.requires_grad;
        Ok(self.push(shape, out, rg, Op::Max { input: a, argmax }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = self.node(a);
        if numel(&shape) != node.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", node.shape)));
        }
        let data = node.data.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Explicit broadcast: shapes are right-aligned and each source extent
    /// must equal the target extent or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let plan = broadcast_plan(&self.node(a).shape, &shape)?;
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(numel(&shape));
        for &st in &plan.starts {
            if plan.copy {
                data.extend_from_slice(&src[st..st + plan.block]);
            } else {
                data.extend(std::iter::repeat(src[st]).take(plan.block));
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, data, rg, Op::BroadcastTo(a)))
    }

    /// `z - logsumexp(z)` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let node = self.node(a);
        check_finite("log_softmax", &node.data)?;
        let (outer, len, inner) = split_axis("log_softmax", &node.shape, axis)?;
        let data = if inner == 1 {
            let mut out = vec![0.0; node.data.len()];
            log_softmax_rows(&node.data, len, &mut out);
            out
        } else {
            let mut out = vec![0.0; node.data.len()];
            let mut row = vec![0.0; len];
            let mut res = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = node.data[(o * len + j) * inner + i];
                    }
                    log_softmax_rows(&row, len, &mut res);
                    for j in 0..len {
                        out[(o * len + j) * inner + i] = res[j];
                    }
                }
            }
            out
        };
        self.unary("log_softmax", a, data, Op::LogSoftmax { input: a, axis })
    }

    /// Batch-mean cross-entropy `-Σ q log softmax(z / τ)` of `[N, K]`
    /// logits against a constant `[N, K]` target, as a single node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f64], tau: f64) -> Result<Var> {
        self.softmax_cross_entropy_mix(logits, &[XentTerm { weight: 1.0, target, tau }], 0.0)
    }

    /// `offset + Σ_i w_i H(q_i, softmax(z / τ_i))`, batch-mean, as one node.
    pub fn softmax_cross_entropy_mix(&mut self, logits: Var, terms: &[XentTerm<'_>], offset: f64) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let node = self.node(logits);
        let (n, k) = match node.shape[..] {
            [n, k] => (n, k),
            _ => return Err(Error::shape(OP, format!("logits must be [N, K], got {:?}", node.shape))),
        };
        check_finite(OP, &node.data)?;
        let mut dz = vec![0.0; n * k];
        let mut row = vec![0.0; k];
        let mut value = offset;
        for t in terms {
            if t.target.len() != n * k {
                return Err(Error::shape(OP, format!("target has {} entries, logits {n}x{k}", t.target.len())));
            }
            if !(t.tau.is_finite() && t.tau > 0.0) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", t.tau)));
            }
            check_finite(OP, t.target)?;
            check_finite(OP, &[t.weight])?;
            let inv_tau = 1.0 / t.tau;
            let c = t.weight / (n as f64 * t.tau);
            let mut total = 0.0;
            for ((z, d), q) in node.data.chunks_exact(k).zip(dz.chunks_exact_mut(k)).zip(t.target.chunks_exact(k)) {
                // Σ q log p = Σ q z/τ - (m + ln Σ e^{z/τ - m}) Σ q
                let mut m = f64::NEG_INFINITY;
                let (mut dot, mut mass) = (0.0, 0.0);
                for ((r, &v), &q) in row.iter_mut().zip(z).zip(q) {
                    *r = v * inv_tau;
                    if *r > m {
                        m = *r;
                    }
                    dot += q * *r;
                    mass += q;
                }
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    s += *r;
                }
                // d/dz_j = w (p_j Σq - q_j) / (N τ)
                let scale = mass / s;
                for ((d, &r), &q) in d.iter_mut().zip(&row).zip(q) {
                    *d += c * (r * scale - q);
                }
                total += dot - (m + s.ln()) * mass;
            }
            value -= t.weight * total / n as f64;
        }
        check_finite(OP, &[value])?;
        let rg = node.requires_grad;
        let op = Op::SoftmaxXent { input: logits, dz };
        Ok(self.push(vec![], vec![value], rg, op))
    }

    /// Stride-1 cross-correlation with zero "same" padding. Input
    /// `[N, C, H, W]`, kernel `[O, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (n, c, h, w, o, k) = conv_dims(&self.node(input).shape, &self.node(kernel).shape)?;
        let p = k / 2;
        let x = &self.node(input).data;
        let kw = &self.node(kernel).data;
        let mut out = vec![0.0; n * o * h * w];
        for b in 0..n {
            for oc in 0..o {
                let dst = &mut out[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
                for ic in 0..c {
                    let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    let kern = &kw[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                    for dy in 0..k {
                        for dx in 0..k {
                            let kv = kern[dy * k + dx];
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < p || sy - p >= h {
                                    continue;
                                }
                                let srow = &src[(sy - p) * w..(sy - p + 1) * w];
                                let drow = &mut dst[y * w..(y + 1) * w];
                                for (xx, d) in drow.iter_mut().enumerate() {
                                    let sx = xx + dx;
                                    if sx >= p && sx - p < w {
                                        *d += kv * srow[sx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        check_finite("conv2d", &out)?;
        let rg = self.node(input).requires_grad || self.node(kernel).requires_grad;
        Ok(self.push(vec![n, o, h, w], out, rg, Op::Conv2d { input, kernel }))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let s = &self.node(a).shape;
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2x2", format!("need [N,C,H>=2,W>=2], got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.node(a).data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool2 { input: a, argmax }))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(db).map(|(g, y)| g * y));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(da).map(|(g, x)| g * x));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|x| x * s)),
            Op::Matmul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                if na.requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &nb.data, true, 0.0, &mut ga);
                    accumulate(grads, *a, ga.into_iter());
                }
                if nb.requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &na.data, true, g, false, 0.0, &mut gb);
                    accumulate(grads, *b, gb.into_iter());
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].data;
                accumulate(grads, *a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }));
            }
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(&node.data).map(|(g, y)| g * y)),
            Op::Log(a) => {
                let x = &self.nodes[a.0].data;
                accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x));
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let src = &self.nodes[input.0];
                let (outer, len, inner) = split_axis("sum", &src.shape, *axis)?;
                let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut out = vec![0.0; src.data.len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[(o * len + j) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                accumulate(grads, *input, out.into_iter());
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].data.len();
                accumulate(grads, *a, std::iter::repeat(g[0]).take(n));
            }
            Op::Max { input, argmax, .. } => {
                let mut out = vec![0.0; self.nodes[input.0].data.len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    out[src] += gi;
                }
                accumulate(grads, *input, out.into_iter());
            }
            Op::Reshape(a) => accumulate(grads, *a, g.iter().copied()),
            Op::BroadcastTo(a) => {
                let src = &self.nodes[a.0];
                let plan = broadcast_plan(&src.shape, &node.shape)?;
                let mut out = vec![0.0; src.data.len()];
                for (gb, &st) in g.chunks_exact(plan.block).zip(&plan.starts) {
                    if plan.copy {
                        out[st..st + plan.block].iter_mut().zip(gb).for_each(|(o, g)| *o += g);
                    } else {
                        out[st] += gb.iter().sum::<f64>();
                    }
                }
                accumulate(grads, *a, out.into_iter());
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis("log_softmax", &node.shape, *axis)?;
                let y = &node.data;
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *input, out.into_iter());
            }
            Op::Conv2d { input, kernel } => {
                let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
                let (n, c, h, w, o, k) = conv_dims(&ni.shape, &nk.shape)?;
                let p = k / 2;
                let mut gin = vec![0.0; ni.data.len()];
                let mut gker = vec![0.0; nk.data.len()];
                for b in 0..n {
                    for oc in 0..o {
                        let gplane = &g[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
                        for ic in 0..c {
                            let in_off = (b * c + ic) * h * w;
                            let k_off = (oc * c + ic) * k * k;
                            for dy in 0..k {
                                for dx in 0..k {
                                    let kv = nk.data[k_off + dy * k + dx];
                                    let mut acc = 0.0;
                                    for y in 0..h {
                                        let sy = y + dy;
                                        if sy < p || sy - p >= h {
                                            continue;
                                        }
                                        for xx in 0..w {
                                            let sx = xx + dx;
                                            if sx < p || sx - p >= w {
                                                continue;
                                            }
                                            let gv = gplane[y * w + xx];
                                            let si = in_off + (sy - p) * w + (sx - p);
                                            acc += gv * ni.data[si];
                                            gin[si] += gv * kv;
                                        }
                                    }
                                    gker[k_off + dy * k + dx] += acc;
                                }
                            }
                        }
                    }
                }
                if ni.requires_grad {
                    accumulate(grads, *input, gin.into_iter());
                }
                if nk.requires_grad {
                    accumulate(grads, *kernel, gker.into_iter());
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut out = vec![0.0; self.nodes[input.0].data.len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    out[src] += gi;
                }
                accumulate(grads, *input, out.into_iter());
            }
            Op::SoftmaxXent { input, dz } => {
                let g0 = g[0];
                accumulate(grads, *input, dz.iter().map(|d| g0 * d));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d),
        slot @ None => *slot = Some(delta.collect()),
    }
}
