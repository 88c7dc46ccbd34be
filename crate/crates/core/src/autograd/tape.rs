//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and enough
//! saved state to run its backward rule. Node indices are handed out in
//! creation order, so the node list is already topologically sorted and
//! the backward pass is a single reverse sweep.

use crate::autograd::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Square(Var),
    Sum(Var),
    Relu(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
        size: usize,
        stride: usize,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Norm {
        x: Var,
        /// 1/‖row‖ per row, or 0 for rows caught by the zero guard.
        inv_norms: Vec<f64>,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
        /// Batch statistics (train) make the mean depend on the input.
        batch_stats: bool,
    },
    Scale {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Guard below which an L2 row is treated as zero.
pub const L2_GUARD: f64 = 1e-12;

/// Records primitive applications and replays them backwards.
///
/// A tape is single-owner; build a fresh one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input; gradients are tracked if `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, rg, Op::Leaf)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Collapses everything after the leading axis: `[B, ...]` → `[B, D]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() == 2 {
            return Ok(x);
        }
        let b = shape[0];
        let d = shape[1..].iter().product();
        self.reshape(x, &[b, d])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = map_tensor(self.value(x), |v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::MulScalar(x, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = map_tensor(self.value(x), |v| v * v);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Square(x))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = map_tensor(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// `y[b,o] = Σ_i x[b,i]·w[i,o] + bias[o]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("affine", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("affine bias", ws, bs));
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(batch * outputs);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        kernels::gemm_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            batch,
            inputs,
            outputs,
        );
        let value = Tensor::new([batch, outputs], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Affine { x, w, b }))
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `k: [F,C,kh,kw]`, plus an
    /// optional per-filter bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (out_h, out_w) = match (
            kernels::out_extent(xs[2], ks[2], stride, pad),
            kernels::out_extent(xs[3], ks[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::dim(
                    "conv2d (kernel larger than padded input)",
                    &xs,
                    &ks,
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim("conv2d bias", &ks, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
            xs[0],
            ks[0],
            &geom,
        );
        let value = Tensor::new([xs[0], ks[0], out_h, out_w], out)?;
        let mut deps = vec![x, k];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Window maxima over `[B,C,H,W]`. Ties resolve to the first element in
    /// row-major scan order within the window.
    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("maxpool2d", &xs, &[size, size]));
        }
        if size == 0 || stride == 0 || size > xs[2] || size > xs[3] {
            return Err(Error::dim(
                "maxpool2d (window larger than input)",
                &xs,
                &[size, size],
            ));
        }
        let (h, w) = (xs[2], xs[3]);
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let planes = xs[0] * xs[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * stride * w + oj * stride;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (oi * stride + di) * w + oj * stride + dj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([xs[0], xs[1], oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::MaxPool {
                x,
                argmax,
                size,
                stride,
            },
        ))
    }

    /// Fused, max-subtracted softmax and mean cross-entropy.
    ///
    /// Returns the scalar loss and the row-stochastic probabilities.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim("softmax_xent", &ls, &[labels.len()]));
        }
        let classes = ls[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Index(format!(
                "label {l} at position {i} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits).data(), classes);
        let batch = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -probs[b * classes + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / batch as f64;
        let probs_t = Tensor::new(ls, probs.clone())?;
        let rg = self.rg(&[logits]);
        let var = self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        );
        Ok((var, probs_t))
    }

    /// Row-wise `x / max(‖x‖₂, guard)`; rows with norm below the guard map to zeros.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("l2_normalize", &xs, &[]));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut inv_norms = Vec::with_capacity(xs[0]);
        for row in src.chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm < L2_GUARD { 0.0 } else { 1.0 / norm };
            out.extend(row.iter().map(|v| v * inv));
            inv_norms.push(inv);
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::L2Norm { x, inv_norms }))
    }

    /// Per-feature standardization of `x: [B,D]` with the batch's own mean and
    /// biased variance. Returns the output and the `(mean, var)` used.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("batch_standardize", &xs, &[]));
        }
        if xs[0] < 2 {
            return Err(Error::contract(format!(
                "batch standardization in train mode needs at least 2 samples, got {}",
                xs[0]
            )));
        }
        let (b, d) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in src.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; d];
        for row in src.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let y = self.standardize_inner(x, &mean, &var, eps, true)?;
        Ok((y, mean, var))
    }

    /// Per-feature standardization with fixed statistics (eval mode).
    pub fn standardize_with(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.standardize_inner(x, mean, var, eps, false)
    }

    fn standardize_inner(
        &mut self,
        x: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != mean.len() || xs[1] != var.len() {
            return Err(Error::dim("standardize", &xs, &[mean.len()]));
        }
        let d = xs[1];
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            for j in 0..d {
                out.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Standardize {
                x,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// `γ·x + β` over `x: [B,D]`; `γ` is `[1]` (shared) or `[D]`, `β` is `[D]`.
    pub fn scale(&mut self, x: Var, gamma: Var, beta: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gamma).to_vec();
        if xs.len() != 2 || !(gs == [1] || gs == [xs[1]]) {
            return Err(Error::dim("scale", &xs, &gs));
        }
        if let Some(b) = beta {
            if self.shape(b) != [xs[1]] {
                return Err(Error::dim("scale shift", &xs, self.shape(b)));
            }
        }
        let d = xs[1];
        let g = self.value(gamma).data();
        let shift = beta.map(|b| self.value(b).data());
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            for j in 0..d {
                let gj = if g.len() == 1 { g[0] } else { g[j] };
                out.push(gj * row[j] + shift.map_or(0.0, |s| s[j]));
            }
        }
        let value = Tensor::new(xs, out)?;
        let mut deps = vec![x, gamma];
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(value, rg, Op::Scale { x, gamma, beta }))
    }

    /// Smallest distance of any recorded ReLU input from its kink, or of any
    /// max-pool window from a tie. Finite-difference checks are only
    /// meaningful when this exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool {
                    x,
                    argmax,
                    size,
                    stride,
                } => {
                    let xs = self.shape(*x);
                    let window = PoolWindow {
                        h: xs[2],
                        w: xs[3],
                        oh: node.value.shape()[2],
                        ow: node.value.shape()[3],
                        size: *size,
                        stride: *stride,
                    };
                    margin = margin.min(window.tie_gap(self.value(*x).data(), argmax));
                }
                _ => {}
            }
        }
        margin
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }

        // Trainable leaves that the root never reached get an exact zero.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`.
    pub fn grad_tensor(&self, v: Var) -> Result<Tensor> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for node {}", v.0)))?;
        Tensor::new(self.shape(v).to_vec(), g.to_vec())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        delta(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily take the op so saved state can be borrowed alongside
        // mutable gradient slots.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(*x, |s| add_into(s, g)),
            Op::Add(a, b) => {
                self.accumulate(*a, |s| add_into(s, g));
                self.accumulate(*b, |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |s| {
                    for ((s, g), b) in s.iter_mut().zip(g).zip(&bv) {
                        *s += g * b;
                    }
                });
                let av = self.value(*a).data().to_vec();
                self.accumulate(*b, |s| {
                    for ((s, g), a) in s.iter_mut().zip(g).zip(&av) {
                        *s += g * a;
                    }
                });
            }
            Op::MulScalar(x, c) => {
                let c = *c;
                self.accumulate(*x, |s| {
                    for (s, g) in s.iter_mut().zip(g) {
                        *s += g * c;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data().to_vec();
                self.accumulate(*x, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&xv) {
                        *s += 2.0 * x * g;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.accumulate(*x, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&xv) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (batch, inputs) = (self.shape(*x)[0], self.shape(*x)[1]);
                let outputs = self.shape(*w)[1];
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data().to_vec();
                    self.accumulate(*x, |s| {
                        kernels::gemm_nt_acc(g, &wv, s, batch, outputs, inputs)
                    });
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data().to_vec();
                    self.accumulate(*w, |s| {
                        kernels::gemm_tn_acc(&xv, g, s, batch, inputs, outputs)
                    });
                }
                self.accumulate(*b, |s| {
                    for row in g.chunks(outputs) {
                        add_into(s, row);
                    }
                });
            }
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            } => {
                let batch = self.shape(*x)[0];
                let filters = self.shape(*k)[0];
                let (dx, dk, db) = kernels::conv_backward(
                    g,
                    cols,
                    self.value(*k).data(),
                    batch,
                    filters,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*k),
                );
                if let Some(dx) = dx {
                    self.accumulate(*x, |s| add_into(s, &dx));
                }
                if let Some(dk) = dk {
                    self.accumulate(*k, |s| add_into(s, &dk));
                }
                if let Some(b) = bias {
                    self.accumulate(*b, |s| add_into(s, &db));
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                self.accumulate(*x, |s| {
                    for (&src, g) in argmax.iter().zip(g) {
                        s[src] += g;
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                self.accumulate(*logits, |s| {
                    for (b, &l) in labels.iter().enumerate() {
                        let row = &probs[b * classes..(b + 1) * classes];
                        let srow = &mut s[b * classes..(b + 1) * classes];
                        for (c, (sv, p)) in srow.iter_mut().zip(row).enumerate() {
                            let target = if c == l { 1.0 } else { 0.0 };
                            *sv += scale * (p - target);
                        }
                    }
                });
            }
            Op::L2Norm { x, inv_norms } => {
                let d = self.shape(*x)[1];
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |s| {
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        if inv == 0.0 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += inv * (gr[j] - yr[j] * dot);
                        }
                    }
                });
            }
            Op::Standardize {
                x,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                if *batch_stats {
                    let y = self.nodes[i].value.data().to_vec();
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gy = vec![0.0; d];
                    for r in 0..b {
                        for j in 0..d {
                            sum_g[j] += g[r * d + j];
                            sum_gy[j] += g[r * d + j] * y[r * d + j];
                        }
                    }
                    let nb = b as f64;
                    self.accumulate(*x, |s| {
                        for r in 0..b {
                            for j in 0..d {
                                let k = r * d + j;
                                s[k] += inv_std[j] / nb * (nb * g[k] - sum_g[j] - y[k] * sum_gy[j]);
                            }
                        }
                    });
                } else {
                    self.accumulate(*x, |s| {
                        for r in 0..b {
                            for j in 0..d {
                                s[r * d + j] += g[r * d + j] * inv_std[j];
                            }
                        }
                    });
                }
            }
            Op::Scale { x, gamma, beta } => {
                let d = self.shape(*x)[1];
                let gv = self.value(*gamma).data().to_vec();
                let shared = gv.len() == 1;
                self.accumulate(*x, |s| {
                    for (k, (sv, gk)) in s.iter_mut().zip(g).enumerate() {
                        *sv += gk * if shared { gv[0] } else { gv[k % d] };
                    }
                });
                if self.requires_grad(*gamma) {
                    let xv = self.value(*x).data().to_vec();
                    self.accumulate(*gamma, |s| {
                        for (k, (gk, xk)) in g.iter().zip(&xv).enumerate() {
                            s[if shared { 0 } else { k % d }] += gk * xk;
                        }
                    });
                }
                if let Some(b) = beta {
                    self.accumulate(*b, |s| {
                        for row in g.chunks(d) {
                            add_into(s, row);
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Max-subtracted softmax over rows of width `classes`.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

struct PoolWindow {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    size: usize,
    stride: usize,
}

impl PoolWindow {
    /// Smallest gap between a window's maximum and any other element in it.
    /// Pairs of exact zeros, as left by an upstream ReLU, stay tied under
    /// small perturbations and are skipped.
    fn tie_gap(&self, src: &[f64], argmax: &[usize]) -> f64 {
        let mut gap = f64::INFINITY;
        let per_plane = self.oh * self.ow;
        for (k, &best) in argmax.iter().enumerate() {
            let base = (k / per_plane) * self.h * self.w;
            let (oi, oj) = ((k % per_plane) / self.ow, k % self.ow);
            for di in 0..self.size {
                for dj in 0..self.size {
                    let idx = base + (oi * self.stride + di) * self.w + oj * self.stride + dj;
                    if idx != best && !(src[best] == 0.0 && src[idx] == 0.0) {
                        gap = gap.min(src[best] - src[idx]);
                    }
                }
            }
        }
        gap
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3]));
        let w = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::zeros([2]));
        let err = tape.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_sum_of_ones_and_strided_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 4.0, 16.0, 20.0]);
    }

    #[test]
    fn conv_kernel_larger_than_padded_input_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 0),
            Err(Error::Dimension { .. })
        ));
        assert!(tape.conv2d(x, k, None, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_basic_and_tie_rule() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let x = tape.param(Tensor::full([1, 1, 4, 4], 0.5));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| g[i] != 0.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 2, 3]));
        assert!(tape.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[0.5, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.5, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.0, 1.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_xent_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([1, 4]));
        let (loss, probs) = tape.softmax_xent(logits, &[2]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|p| (p - 0.25).abs() < 1e-12));

        let logits = tape.constant(t(&[1, 3], &[0.0, 1000.0, 0.0]));
        let (loss, _) = tape.softmax_xent(logits, &[1]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(
            tape.softmax_xent(logits, &[0, 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_scalar_rules() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul_scalar(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Contract(_))));

        let x = tape.param(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::ones([3]));
        let unused = tape.param(Tensor::full([2], 7.0));
        let s = tape.sum(used);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_rows_and_zero_guard() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn batch_standardize_needs_two_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 3]));
        assert!(matches!(
            tape.batch_standardize(x, 1e-5),
            Err(Error::Contract(_))
        ));
    }
}
