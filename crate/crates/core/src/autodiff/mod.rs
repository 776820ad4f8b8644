//! Dynamic reverse-mode autodiff over a fixed op vocabulary.
//!
//! A [`Tape`] records nodes in creation order, which is already a
//! topological order, so [`Var::backward`] is a single reverse sweep.
//! Nodes that do not depend on any gradient-requiring leaf carry no
//! backward work.

pub mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, DanError, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Relu(usize),
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    SoftmaxXent { logits: usize, probs: Vec<f64>, labels: Vec<usize> },
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Sum(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (falls back to biased for a single sample).
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    /// Gradient from the most recent [`Var::backward`] call, if this node
    /// requires one.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Tensor::new(self.value().dims().to_vec(), g.clone()).ok()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip_same(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.dims().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let dims = x.dims();
        if dims.len() < 2 || b.dims() != [dims[1]] {
            return shape_err(format!("add_bias: {:?} with bias {:?}", dims, b.dims()));
        }
        let (c, inner) = (dims[1], dims[2..].iter().product::<usize>());
        let mut out = x.data().to_vec();
        for (blk, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b.data()[blk % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(dims.to_vec(), out)?;
        Ok(self.binary(bias, v, Op::AddBias { x: self.id, bias: bias.id }))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Bias-free cross-correlation of `[N, C_i, H, W]` with `[C_o, C_i, k, k]`.
    pub fn conv2d(&self, weights: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weights.value());
        let (&[n, c_in, h, wd], &[c_out, wc_in, k, k2]) = (x.dims(), w.dims()) else {
            return shape_err(format!("conv2d: input {:?}, filters {:?}", x.dims(), w.dims()));
        };
        if c_in != wc_in || k != k2 {
            return shape_err(format!("conv2d: input {:?}, filters {:?}", x.dims(), w.dims()));
        }
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k, stride, pad };
        let Some((oh, ow)) = geom.output_hw() else {
            return shape_err(format!(
                "conv2d: output size not integral for {h}x{wd}, k={k}, stride={stride}, pad={pad}"
            ));
        };
        let out = kernels::conv2d(x.data(), w.data(), &geom);
        let v = Tensor::new(vec![n, c_out, oh, ow], out)?;
        Ok(self.binary(weights, v, Op::Conv2d { x: self.id, w: weights.id, geom }))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c, h, w] = x.dims() else {
            return shape_err(format!("maxpool2d needs NCHW, got {:?}", x.dims()));
        };
        if window == 0 || stride == 0 || h < window || w < window
            || !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride)
        {
            return shape_err(format!("maxpool2d: {h}x{w} not divisible by window {window}, stride {stride}"));
        }
        let (out, argmax) = kernels::maxpool2d(x.data(), n * c, h, w, window, stride);
        let dims = vec![n, c, (h - window) / stride + 1, (w - window) / stride + 1];
        let v = Tensor::new(dims, out)?;
        Ok(self.unary(v, Op::MaxPool { x: self.id, argmax }))
    }

    /// Batch-statistics normalization over every axis except 1.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        let x = self.value();
        let (c, count) = bn_layout(&x, &gamma.value(), &beta.value())?;
        if count == 0 || x.dims()[0] == 0 {
            return Err(DanError::EmptyDataset);
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for_each_channel(&x, |ch, v| mean[ch] += v);
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for_each_channel(&x, |ch, v| var[ch] += (v - mean[ch]).powi(2));
        let biased: Vec<f64> = var.iter().map(|s| s / count as f64).collect();
        let unbiased = if count > 1 {
            var.iter().map(|s| s / (count - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (c, _) = bn_layout(&x, &gamma.value(), &beta.value())?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch_norm_eval: running stats length");
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(gamma, beta, mean, inv_std, false)
    }

    fn bn_apply(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for_each_channel(&x, |ch, v| {
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g.data()[ch] * h + b.data()[ch]);
        });
        let v = Tensor::new(x.dims().to_vec(), out)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats };
        Ok(self.tape.push(v, op, rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let &[n, k] = logits.dims() else {
            return shape_err(format!("softmax_cross_entropy needs [N,K], got {:?}", logits.dims()));
        };
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DanError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in logits.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.unary(v, Op::SoftmaxXent { logits: self.id, probs, labels: labels.to_vec() }))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(dims)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| DanError::InvalidArgument("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].dims();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        for v in &values {
            let d = v.dims();
            if d.len() != base.len() || d.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err(format!("concat: {:?} vs {:?}", d, base));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut dims = base.to_vec();
        dims[axis] = values.iter().map(|v| v.dims()[axis]).sum();
        let mut out = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for v in &values {
                let blk = v.dims()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        for p in parts {
            first.same_tape(p);
        }
        let op = Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis };
        Ok(first.tape.push(Tensor::new(dims, out)?, op, rg))
    }

    /// Populates gradients of every gradient-requiring node reachable from
    /// this scalar.
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", nodes[self.id].value.dims()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.tape.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn bn_layout(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let dims = x.dims();
    if dims.len() < 2 {
        return shape_err(format!("batch norm needs [N, C, ...], got {dims:?}"));
    }
    let c = dims[1];
    if gamma.dims() != [c] || beta.dims() != [c] {
        return shape_err(format!("batch norm: {c} channels, gamma {:?}, beta {:?}", gamma.dims(), beta.dims()));
    }
    Ok((c, x.len() / c))
}

/// Visits every element of an `[N, C, ...]` tensor in storage order with its
/// channel index.
fn for_each_channel(x: &Tensor, mut f: impl FnMut(usize, f64)) {
    let c = x.dims()[1];
    let inner: usize = x.dims()[2..].iter().product();
    for (blk, chunk) in x.data().chunks(inner).enumerate() {
        let ch = blk % c;
        for &v in chunk {
            f(ch, v);
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: impl FnOnce() -> Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contrib();
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
        slot => *slot = Some(c),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &*nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, || g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
            accumulate(nodes, grads, *b, || g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, || g.iter().map(|v| v * s).collect()),
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, || g.to_vec());
            let dims = node.value.dims();
            let (c, inner) = (dims[1], dims[2..].iter().product::<usize>());
            accumulate(nodes, grads, *bias, || {
                let mut gb = vec![0.0; c];
                for (blk, chunk) in g.chunks(inner).enumerate() {
                    gb[blk % c] += chunk.iter().sum::<f64>();
                }
                gb
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
            accumulate(nodes, grads, *a, || kernels::matmul_grad_lhs(g, bv.data(), m, k, n));
            accumulate(nodes, grads, *b, || kernels::matmul_grad_rhs(av.data(), g, m, k, n));
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, || kernels::conv2d_grad_input(wv.data(), g, geom));
            accumulate(nodes, grads, *w, || kernels::conv2d_grad_weight(xv.data(), g, geom));
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, || {
                g.iter().zip(xv.data()).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect()
            });
        }
        Op::MaxPool { x, argmax } => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, || {
                let mut gx = vec![0.0; n];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
                gx
            });
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let xv = val(*x);
            let gam = val(*gamma).data().to_vec();
            let c = gam.len();
            let count = (xv.len() / c) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            let inner: usize = xv.dims()[2..].iter().product();
            for (blk, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                let ch = blk % c;
                for (&gv, &hv) in gc.iter().zip(hc) {
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * hv;
                }
            }
            accumulate(nodes, grads, *gamma, || sum_gx.clone());
            accumulate(nodes, grads, *beta, || sum_g.clone());
            accumulate(nodes, grads, *x, || {
                let mut gx = Vec::with_capacity(g.len());
                for (blk, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = blk % c;
                    let scale = gam[ch] * inv_std[ch];
                    for (&gv, &hv) in gc.iter().zip(hc) {
                        if *batch_stats {
                            gx.push(scale * (gv - sum_g[ch] / count - hv * sum_gx[ch] / count));
                        } else {
                            gx.push(scale * gv);
                        }
                    }
                }
                gx
            });
        }
        Op::SoftmaxXent { logits, probs, labels } => {
            let k = val(*logits).dims()[1];
            let n = labels.len() as f64;
            accumulate(nodes, grads, *logits, || {
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= g[0] / n);
                gl
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, || g.to_vec()),
        Op::Sum(x) => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, || vec![g[0]; n]);
        }
        Op::Concat { parts, axis } => {
            let dims = node.value.dims();
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[axis + 1..].iter().product();
            let mut offset = 0;
            for &p in parts {
                let blk = val(p).dims()[*axis] * inner;
                let total = dims[*axis] * inner;
                accumulate(nodes, grads, p, || {
                    let mut gp = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + blk]);
                    }
                    gp
                });
                offset += blk;
            }
        }
    }
}

/// Bias-carrying convolution: cross-correlation plus one bias per output
/// channel.
pub fn conv2d<'t>(x: &Var<'t>, weights: &Var<'t>, bias: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    x.conv2d(weights, stride, pad)?.add_bias(bias)
}

/// Central-difference gradient estimate `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

/// Elementwise agreement `|a - n| <= max(rel * max(|a|, |n|), abs_floor)`.
/// Returns the worst violation ratio (`<= 1` means every element passes).
pub fn gradient_agreement(analytic: &Tensor, numeric: &Tensor, rel: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let allowed = (rel * a.abs().max(n.abs())).max(abs_floor);
            (a - n).abs() / allowed
        })
        .fold(0.0, f64::max)
}
