//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs. Inputs always precede outputs, so a single reverse sweep over
//! node ids visits the graph in topological order, each node once.

use super::kernels::{self, ConvGeom};
use super::{conv_output_extent, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics computed by [`Tape::batch_standardize`].
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Option<Vec<T>>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    BatchStandardize {
        input: Var,
        inv_std: Vec<T>,
    },
    Standardize {
        input: Var,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Records operations for one forward pass and replays them backward.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a `[N, C, ...]` shape into (N, C, spatial size).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("expected at least [N, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of `[N, Cin, H, W]` input with a `[Cout, Cin, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err(format!(
                "conv2d needs rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(shape_err(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ks:?}"
            )));
        }
        let ho = conv_output_extent(xs[2], ks[2], stride, padding)?;
        let wo = conv_output_extent(xs[3], ks[3], stride, padding)?;
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let batch = xs[0];
        let keep_cols = self.requires_grad(kernel);
        let cols_len = geom.patch_len() * geom.positions();
        let mut out = vec![T::ZERO; batch * geom.output_len()];
        let mut stored = keep_cols.then(|| vec![T::ZERO; batch * cols_len]);
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::ZERO; cols_len] };
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for n in 0..batch {
                let cols = match stored.as_mut() {
                    Some(all) => &mut all[n * cols_len..(n + 1) * cols_len],
                    None => &mut scratch[..],
                };
                kernels::im2col(&geom, &x[n * geom.input_len()..(n + 1) * geom.input_len()], cols);
                kernels::conv_forward_sample(
                    &geom,
                    k,
                    cols,
                    &mut out[n * geom.output_len()..(n + 1) * geom.output_len()],
                );
            }
        }
        let value = Tensor::new(vec![batch, geom.cout, ho, wo], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols: stored,
            },
        ))
    }

    /// `out[n, j] = sum_i weight[j, i] * input[n, i] + bias[j]`
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(shape_err(format!("dense: input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::ZERO; n * dout];
        for s in 0..n {
            let row = &x[s * din..(s + 1) * din];
            for j in 0..dout {
                out[s * dout + j] = kernels::dot(&w[j * din..(j + 1) * din], row) + b[j];
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Relu(input))
    }

    /// Mean over all spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 3 {
            return Err(shape_err(format!("global_avg_pool needs [N, C, ...], got {shape:?}")));
        }
        let (n, c, s) = channel_layout(&shape)?;
        if s == 0 {
            return Err(shape_err("global_avg_pool over an empty spatial extent"));
        }
        let inv = T::ONE / T::from_f64(s as f64);
        let x = self.value(input).data();
        let out: Vec<T> = (0..n * c).map(|i| kernels::sum(&x[i * s..(i + 1) * s]) * inv).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(input)))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(shape_err(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::ZERO; n * k];
        let mut total = T::ZERO;
        for s in 0..n {
            let row = &x[s * k..(s + 1) * k];
            let m = row.iter().copied().fold(row[0], T::max);
            let p = &mut probs[s * k..(s + 1) * k];
            let mut z = T::ZERO;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - m).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / z;
            }
            total += m + z.ln() - row[labels[s]];
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = kernels::sum(self.value(input).data());
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(total), rg, Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// Per-channel `gamma[c] * x + beta[c]` on a `[N, C, ...]` input.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, s) = channel_layout(&shape)?;
        let (gs, bs) = (self.value(gamma).shape(), self.value(beta).shape());
        if gs != [c] || bs != [c] {
            return Err(shape_err(format!(
                "channel_affine: input {shape:?} with gamma {gs:?}, beta {bs:?}"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::ZERO; x.len()];
        for s_n in 0..n {
            for ch in 0..c {
                let o = (s_n * c + ch) * s;
                for i in o..o + s {
                    out[i] = g[ch] * x[i] + b[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(value, rg, Op::ChannelAffine { input, gamma, beta }))
    }

    /// Standardizes each channel with statistics of the current batch.
    ///
    /// A channel with zero variance maps to all zeros.
    pub fn batch_standardize(&mut self, input: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, s) = channel_layout(&shape)?;
        let m = n * s;
        if m == 0 {
            return Err(shape_err("batch_standardize over an empty batch"));
        }
        let inv_m = T::ONE / T::from_f64(m as f64);
        let x = self.value(input).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        let mut inv_std = vec![T::ZERO; c];
        let mut out = vec![T::ZERO; x.len()];
        for ch in 0..c {
            let mut acc = T::ZERO;
            for s_n in 0..n {
                let o = (s_n * c + ch) * s;
                acc += kernels::sum(&x[o..o + s]);
            }
            let mu = acc * inv_m;
            let mut sq = T::ZERO;
            for s_n in 0..n {
                let o = (s_n * c + ch) * s;
                for &v in &x[o..o + s] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            let v = sq * inv_m;
            let is = T::ONE / (v + eps).sqrt();
            for s_n in 0..n {
                let o = (s_n * c + ch) * s;
                for i in o..o + s {
                    out[i] = (x[i] - mu) * is;
                }
            }
            mean[ch] = mu;
            var[ch] = v;
            inv_std[ch] = is;
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input]);
        let var_id = self.push(value, rg, Op::BatchStandardize { input, inv_std });
        Ok((var_id, BatchStats { mean, var, count: m }))
    }

    /// Standardizes each channel with fixed statistics.
    pub fn standardize(&mut self, input: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, s) = channel_layout(&shape)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(format!(
                "standardize: {c} channels, {} means, {} variances",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let mut out = vec![T::ZERO; x.len()];
        for s_n in 0..n {
            for ch in 0..c {
                let o = (s_n * c + ch) * s;
                for i in o..o + s {
                    out[i] = (x[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Standardize { input, inv_std }))
    }

    /// Back-propagates from a scalar `loss`, adding into every reached node's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![T::ZERO; len]))
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols,
            } => {
                let k = geom.patch_len();
                let p = geom.positions();
                let out_len = geom.output_len();
                let w = self.value(*kernel).data();
                if let (Some(dw), Some(cols)) = (self.slot(grads, *kernel), cols.as_ref()) {
                    for n in 0..*batch {
                        let gs = &g[n * out_len..(n + 1) * out_len];
                        let cs = &cols[n * k * p..(n + 1) * k * p];
                        for co in 0..geom.cout {
                            let grow = &gs[co * p..(co + 1) * p];
                            for ki in 0..k {
                                dw[co * k + ki] += kernels::dot(grow, &cs[ki * p..(ki + 1) * p]);
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let in_len = geom.input_len();
                    let mut dcols = vec![T::ZERO; k * p];
                    for n in 0..*batch {
                        dcols.fill(T::ZERO);
                        let gs = &g[n * out_len..(n + 1) * out_len];
                        for co in 0..geom.cout {
                            let grow = &gs[co * p..(co + 1) * p];
                            for ki in 0..k {
                                kernels::axpy(w[co * k + ki], grow, &mut dcols[ki * p..(ki + 1) * p]);
                            }
                        }
                        kernels::col2im(geom, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*weight).shape()[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for s in 0..n {
                        for j in 0..dout {
                            kernels::axpy(
                                g[s * dout + j],
                                &w[j * din..(j + 1) * din],
                                &mut dx[s * din..(s + 1) * din],
                            );
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    for s in 0..n {
                        for j in 0..dout {
                            kernels::axpy(
                                g[s * dout + j],
                                &x[s * din..(s + 1) * din],
                                &mut dw[j * din..(j + 1) * din],
                            );
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for s in 0..n {
                        for j in 0..dout {
                            db[j] += g[s * dout + j];
                        }
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for i in 0..g.len() {
                        if x[i] > T::ZERO {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                let s: usize = shape[2..].iter().product();
                let inv = T::ONE / T::from_f64(s as f64);
                if let Some(dx) = self.slot(grads, *input) {
                    for (i, &gv) in g.iter().enumerate() {
                        let share = gv * inv;
                        for d in &mut dx[i * s..(i + 1) * s] {
                            *d += share;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    for s in 0..n {
                        for j in 0..k {
                            let target = if j == labels[s] { T::ONE } else { T::ZERO };
                            dx[s * k + j] += scale * (probs[s * k + j] - target);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (di, &gi) in d.iter_mut().zip(g) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * xb[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * xa[i];
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(d) = self.slot(grads, *input) {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di += *factor * gi;
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(d) = self.slot(grads, *input) {
                    for di in d.iter_mut() {
                        *di += g[0];
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(d) = self.slot(grads, *input) {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let shape = self.value(*input).shape();
                let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for s_n in 0..n {
                        for ch in 0..c {
                            let o = (s_n * c + ch) * s;
                            kernels::axpy(gm[ch], &g[o..o + s], &mut dx[o..o + s]);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for s_n in 0..n {
                        for ch in 0..c {
                            let o = (s_n * c + ch) * s;
                            dg[ch] += kernels::dot(&g[o..o + s], &x[o..o + s]);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for s_n in 0..n {
                        for ch in 0..c {
                            let o = (s_n * c + ch) * s;
                            db[ch] += kernels::sum(&g[o..o + s]);
                        }
                    }
                }
            }
            Op::BatchStandardize { input, inv_std } => {
                let shape = node.value.shape();
                let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                let xhat = node.value.data();
                let m = T::from_f64((n * s) as f64);
                if let Some(dx) = self.slot(grads, *input) {
                    for ch in 0..c {
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for s_n in 0..n {
                            let o = (s_n * c + ch) * s;
                            sg += kernels::sum(&g[o..o + s]);
                            sgx += kernels::dot(&g[o..o + s], &xhat[o..o + s]);
                        }
                        let k = inv_std[ch] / m;
                        for s_n in 0..n {
                            let o = (s_n * c + ch) * s;
                            for i in o..o + s {
                                dx[i] += k * (m * g[i] - sg - xhat[i] * sgx);
                            }
                        }
                    }
                }
            }
            Op::Standardize { input, inv_std } => {
                let shape = node.value.shape();
                let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                if let Some(dx) = self.slot(grads, *input) {
                    for s_n in 0..n {
                        for ch in 0..c {
                            let o = (s_n * c + ch) * s;
                            kernels::axpy(inv_std[ch], &g[o..o + s], &mut dx[o..o + s]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_all_ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 5, 5]));
        let k = tape.constant(Tensor::from_fn(vec![4, 3, 3, 3], |i| i as f32 * 0.1 - 1.0));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 7, 5], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let k = Tensor::<f64>::from_fn(vec![4, 3, 3, 3], |i| ((i * 104_729) % 17) as f64 / 8.0 - 1.0);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            let y = tape.conv2d(xv, kv, stride, pad).unwrap();
            let expect = naive_conv(&x, &k, stride, pad);
            for (a, b) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::Shape(_))));
        let k2 = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, k2, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let bad = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.dense(x, bad, zero).is_err());
    }

    #[test]
    fn dense_matches_naive_matmul() {
        let x = Tensor::<f64>::from_fn(vec![3, 4], |i| (i as f64 * 0.7).sin());
        let w = Tensor::<f64>::from_fn(vec![5, 4], |i| (i as f64 * 0.3).cos());
        let b = Tensor::<f64>::from_fn(vec![5], |i| i as f64 * 0.1);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.dense(xv, wv, bv).unwrap();
        for n in 0..3 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for i in 0..4 {
                    acc += w.data()[j * 4 + i] * x.data()[n * 4 + i];
                }
                assert!((tape.value(y).data()[n * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let neg = tape.constant(t(&[4], &[-1.0, -0.5, -3.0, -1e-6]));
        let z = tape.relu(neg);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[2.0; 4]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, 3.0, 0.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
        let empty = tape.constant(Tensor::zeros(vec![1, 2, 0, 3]));
        assert!(tape.global_avg_pool(empty).is_err());
    }

    #[test]
    fn global_avg_pool_matches_naive_mean() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4, 4], |i| (i as f64 * 1.3).sin());
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.global_avg_pool(xv).unwrap();
        for nc in 0..6 {
            let mean: f64 = x.data()[nc * 16..(nc + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((tape.value(y).data()[nc] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 10], 0.3), true);
        let l = tape.cross_entropy(x, &[4]).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let row_sum: f64 = tape.grad(x).unwrap().data().iter().sum();
        assert!(row_sum.abs() < 1e-12);

        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = tape.cross_entropy(x, &[0]).unwrap();
        // -log(e^1 / (e^1 + e^2)) = ln(1 + e)
        let oracle = (1.0 + 1f64.exp()).ln();
        assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 1.313262).abs() < 1e-6);

        let x = tape.constant(Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-20);

        let bad = tape.cross_entropy(x, &[3]);
        assert!(matches!(bad, Err(Error::Label { label: 3, classes: 3 })));
    }

    #[test]
    fn backward_sum_of_scaled() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 1.0]), true);
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_accumulates_double() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32 * 0.1 - 0.7), true);
        let k = tape.leaf(Tensor::from_fn(vec![2, 1, 3, 3], |i| (i as f32 * 0.37).sin()), true);
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        let once = tape.grad(k).unwrap().clone();
        tape.backward(s).unwrap();
        let twice = tape.grad(k).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_leaves_unrelated_nodes_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let other = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(other).is_none());
        let frozen = tape.constant(t(&[2], &[1.0, 1.0]));
        let z = tape.add(x, frozen).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn standardize_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 1, 2, 2], 3.5));
        let (y, stats) = tape.batch_standardize(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![3.5]);
        assert_eq!(stats.var, vec![0.0]);
    }
}
