//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node in topological order. Values
//! are computed eagerly; [`Graph::backward`] walks the tape once in reverse and
//! returns the gradient of a scalar loss with respect to each leaf that was
//! created with [`Graph::leaf`].
//!
//! `sign` and `clamp` are recorded as blocked nodes: their pullback is zero, so
//! an attack never differentiates through its own projection step.

mod conv;
mod gradcheck;

pub use gradcheck::{finite_diff_grad, relative_error};

use std::collections::BTreeMap;

use conv::ConvGeom;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Linear,
    Conv2d,
    MaxPool2x2,
    Relu,
    Flatten,
    LogSoftmax,
    Gather,
    Sum,
    Mean,
    SumRows,
    ScalarMul,
    Exp,
    Sqrt,
    Clamp,
    Sign,
    GaussianStyleCe,
    CwMargin,
}

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Reshape(NodeId),
    LogSoftmax(NodeId),
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    ScalarMul(NodeId, T),
    Exp(NodeId),
    Sqrt(NodeId),
    Blocked,
    GaussianStyleCe {
        mu: NodeId,
        wg: NodeId,
        labels: Vec<usize>,
        sigma: T,
        probs: Vec<T>,
    },
    CwMargin {
        logits: NodeId,
        grad_pairs: Vec<Option<(usize, usize)>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    kind: OpKind,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by leaf node.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A computation tape. Single-threaded; build one per forward pass.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    accumulate: bool,
    accumulated: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            accumulate: false,
            accumulated: BTreeMap::new(),
        }
    }

    /// When on, repeated [`backward`](Self::backward) calls are allowed and
    /// leaf gradients are summed across calls.
    pub fn set_accumulate(&mut self, on: bool) {
        self.accumulate = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].kind
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, OpKind::Leaf, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, OpKind::Leaf, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, kind: OpKind, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            kind,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, kind: OpKind, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind_name(kind) });
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, kind, op, rg))
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        Ok(())
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, kind: OpKind, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(kind_name(kind), va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(out, kind, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, OpKind::Mul, |x, y| x * y)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (n, k) = rank2("matmul", self.value(a).shape())?;
        let (k2, m) = rank2("matmul", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        self.push(Tensor::new([n, m], out)?, OpKind::MatMul, Op::MatMul(a, b), &[a, b])
    }

    /// Affine layer `x w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.check(&[x, w])?;
        let (n, fan_in) = rank2("linear", self.value(x).shape())?;
        let (fan_out, w_in) = rank2("linear", self.value(w).shape())?;
        if fan_in != w_in {
            return Err(Error::shape("linear", format!("input width {fan_in} vs weight {w_in}")));
        }
        let mut out = vec![T::zero(); n * fan_out];
        if let Some(b) = b {
            self.check(&[b])?;
            let bv = self.value(b);
            if bv.shape() != [fan_out] {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(w).data(),
            (1, fan_in as isize),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            (fan_out as isize, 1),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new([n, fan_out], out)?, OpKind::Linear, Op::Linear { x, w, b }, &inputs)
    }

    /// Stride-1 convolution. `x: [n, c, h, w]`, `w: [f, c, k, k]`, `b: [f]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> Result<NodeId> {
        self.check(&[x, w])?;
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let ([batch, in_ch, height, width], [filters, w_ch, kh, kw]) = (xs, ws) else {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}; both must be 4-d")));
        };
        if w_ch != in_ch || kh != kw {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if height + 2 * pad < *kh || width + 2 * pad < *kw {
            return Err(Error::shape("conv2d", format!("kernel {kh} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: *batch,
            in_ch: *in_ch,
            height: *height,
            width: *width,
            filters: *filters,
            kernel: *kh,
            pad,
        };
        if let Some(b) = b {
            self.check(&[b])?;
            if self.value(b).shape() != [geom.filters] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let out = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = [geom.batch, geom.filters, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, out)?, OpKind::Conv2d, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::shape("maxpool2x2", format!("{shape:?}")));
        }
        let (out, argmax) = conv::maxpool2x2_forward(&shape, self.value(x).data());
        let out_shape = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        self.push(Tensor::new(out_shape, out)?, OpKind::MaxPool2x2, Op::MaxPool2x2 { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, OpKind::Relu, Op::Relu(x), &[x])
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x);
        if v.ndim() < 1 {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let n = v.shape()[0];
        let rest = v.numel() / n;
        let out = v.clone().reshape([n, rest])?;
        self.push(out, OpKind::Flatten, Op::Reshape(x), &[x])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x);
        let k = *v.shape().last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|z| *z = *z - lse);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, OpKind::LogSoftmax, Op::LogSoftmax(x), &[x])
    }

    /// Picks `x[i, index[i]]` from a `[n, k]` matrix.
    pub fn gather(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        self.check(&[x])?;
        let (n, k) = rank2("gather", self.value(x).shape())?;
        if index.len() != n {
            return Err(Error::shape("gather", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let d = self.value(x).data();
        let out = index.iter().enumerate().map(|(i, &j)| d[i * k + j]).collect();
        self.push(
            Tensor::from_vec(out),
            OpKind::Gather,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), OpKind::Sum, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), OpKind::Mean, Op::Mean(x), &[x])
    }

    /// Row sums of a `[n, k]` matrix.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let (_, k) = rank2("sum_rows", self.value(x).shape())?;
        let out = self.value(x).data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        self.push(Tensor::from_vec(out), OpKind::SumRows, Op::SumRows(x), &[x])
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v * c);
        self.push(out, OpKind::ScalarMul, Op::ScalarMul(x, c), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(T::exp);
        self.push(out, OpKind::Exp, Op::Exp(x), &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let out = self.value(x).map(T::sqrt);
        self.push(out, OpKind::Sqrt, Op::Sqrt(x), &[x])
    }

    /// Elementwise clamp; recorded with a zero pullback.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.blocked(out, OpKind::Clamp)
    }

    /// Elementwise sign with `sign(0) = 0`; recorded with a zero pullback.
    pub fn sign(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let out = self.value(x).map(sign);
        self.blocked(out, OpKind::Sign)
    }

    fn blocked(&mut self, out: Tensor<T>, kind: OpKind) -> Result<NodeId> {
        if !out.all_finite() {
            return Err(Error::NonFinite { op: kind_name(kind) });
        }
        Ok(self.push_unchecked(out, kind, Op::Blocked, false))
    }

    /// Per-sample cross-entropy under the Gaussian-style softmax.
    ///
    /// For style means `mu: [n, d_s]` and a linear style classifier
    /// `wg: [k, d_s]`, returns `[n]` with
    /// `loss_i = logsumexp_j(wg_j . mu_i + sigma^2/2 |wg_j - wg_y|^2) - wg_y . mu_i`.
    pub fn gaussian_style_ce(&mut self, mu: NodeId, wg: NodeId, labels: &[usize], sigma: T) -> Result<NodeId> {
        self.check(&[mu, wg])?;
        if sigma < T::zero() {
            return Err(Error::Invalid(format!("style noise scale must be >= 0, got {sigma}")));
        }
        let (n, ds) = rank2("gaussian_style_ce", self.value(mu).shape())?;
        let (k, ds2) = rank2("gaussian_style_ce", self.value(wg).shape())?;
        if ds != ds2 || labels.len() != n {
            return Err(Error::shape(
                "gaussian_style_ce",
                format!("mu [{n}, {ds}], wg [{k}, {ds2}], {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let penalty = pairwise_half_sq_dist(self.value(wg).data(), k, ds, sigma);
        let mut logits = vec![T::zero(); n * k];
        T::gemm(
            n,
            ds,
            k,
            T::one(),
            self.value(mu).data(),
            (ds as isize, 1),
            self.value(wg).data(),
            (1, ds as isize),
            T::zero(),
            &mut logits,
            (k as isize, 1),
        );
        let mut probs = vec![T::zero(); n * k];
        let mut loss = Vec::with_capacity(n);
        for i in 0..n {
            let y = labels[i];
            let z = &logits[i * k..(i + 1) * k];
            let p = &mut probs[i * k..(i + 1) * k];
            for j in 0..k {
                p[j] = z[j] + penalty[y * k + j];
            }
            let max = p.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = p.iter().map(|&a| (a - max).exp()).sum();
            let lse = max + total.ln();
            p.iter_mut().for_each(|a| *a = (*a - lse).exp());
            loss.push(lse - z[y]);
        }
        self.push(
            Tensor::from_vec(loss),
            OpKind::GaussianStyleCe,
            Op::GaussianStyleCe {
                mu,
                wg,
                labels: labels.to_vec(),
                sigma,
                probs,
            },
            &[mu, wg],
        )
    }

    /// Per-sample margin `max(max_{j != y} z_j - z_y, -kappa)`.
    pub fn cw_margin(&mut self, logits: NodeId, labels: &[usize], kappa: T) -> Result<NodeId> {
        self.check(&[logits])?;
        let (n, k) = rank2("cw_margin", self.value(logits).shape())?;
        if k < 2 || labels.len() != n {
            return Err(Error::shape("cw_margin", format!("[{n}, {k}] with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let z = self.value(logits).data();
        let mut out = Vec::with_capacity(n);
        let mut grad_pairs = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let (best, best_val) = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .fold((usize::MAX, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let margin = best_val - row[y];
            if margin > -kappa {
                out.push(margin);
                grad_pairs.push(Some((best, y)));
            } else {
                out.push(-kappa);
                grad_pairs.push(None);
            }
        }
        self.push(Tensor::from_vec(out), OpKind::CwMargin, Op::CwMargin { logits, grad_pairs }, &[logits])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf created with [`leaf`](Self::leaf) gets an entry, zero when
    /// the loss does not depend on it.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(&[loss])?;
        if self.consumed && !self.accumulate {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        let mut leaves = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(NodeId(id), g);
                continue;
            }
            self.pullback(id, g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.entry(NodeId(i)).or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.consumed = true;
        if self.accumulate {
            for (id, g) in leaves {
                let mut slot = self.accumulated.remove(&id);
                add_into(&mut slot, g);
                self.accumulated.insert(id, slot.expect("slot filled"));
            }
            return Ok(Gradients {
                grads: self.accumulated.clone(),
            });
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn pullback(&self, id: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Blocked => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.map(|v| -v));
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(&g, &v)| g * v).collect();
                    add_into(&mut grads[a.0], Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va.data()).map(|(&g, &v)| g * v).collect();
                    add_into(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.wants(*a) {
                    // da = g b^T
                    let mut d = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), gd, (m as isize, 1), vb.data(), (1, m as isize), T::zero(), &mut d, (k as isize, 1));
                    add_into(&mut grads[a.0], Tensor::new([n, k], d)?);
                }
                if self.wants(*b) {
                    // db = a^T g
                    let mut d = vec![T::zero(); k * m];
                    T::gemm(k, n, m, T::one(), va.data(), (1, k as isize), gd, (m as isize, 1), T::zero(), &mut d, (m as isize, 1));
                    add_into(&mut grads[b.0], Tensor::new([k, m], d)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fan_in) = (vx.shape()[0], vx.shape()[1]);
                let fan_out = vw.shape()[0];
                if self.wants(*x) {
                    // dx = g w
                    let mut d = vec![T::zero(); n * fan_in];
                    T::gemm(n, fan_out, fan_in, T::one(), gd, (fan_out as isize, 1), vw.data(), (fan_in as isize, 1), T::zero(), &mut d, (fan_in as isize, 1));
                    add_into(&mut grads[x.0], Tensor::new([n, fan_in], d)?);
                }
                if self.wants(*w) {
                    // dw = g^T x
                    let mut d = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, n, fan_in, T::one(), gd, (1, fan_out as isize), vx.data(), (fan_in as isize, 1), T::zero(), &mut d, (fan_in as isize, 1));
                    add_into(&mut grads[w.0], Tensor::new([fan_out, fan_in], d)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut d = vec![T::zero(); fan_out];
                    for row in gd.chunks(fan_out) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    add_into(&mut grads[b.0], Tensor::new([fan_out], d)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = conv::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd, want);
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    add_into(&mut grads[b.0], Tensor::new([geom.filters], db)?);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if self.wants(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                    let dd = d.data_mut();
                    for (&src, &v) in argmax.iter().zip(gd) {
                        dd[src] = dd[src] + v;
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let d = gd
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    add_into(&mut grads[x.0], Tensor::new(vx.shape().to_vec(), d)?);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.reshape(self.value(*x).shape().to_vec())?);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let out = node.value.data();
                    let k = *node.value.shape().last().expect("checked in forward");
                    let mut d = vec![T::zero(); out.len()];
                    for ((drow, grow), orow) in d.chunks_mut(k).zip(gd.chunks(k)).zip(out.chunks(k)) {
                        let gsum: T = grow.iter().copied().sum();
                        for j in 0..k {
                            drow[j] = grow[j] - orow[j].exp() * gsum;
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(node.value.shape().to_vec(), d)?);
                }
            }
            Op::Gather { x, index } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let k = shape[1];
                    let mut d = Tensor::zeros(shape);
                    for (i, (&j, &v)) in index.iter().zip(gd).enumerate() {
                        d.data_mut()[i * k + j] = v;
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], Tensor::full(self.value(*x).shape().to_vec(), gd[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let v = self.value(*x);
                    let each = gd[0] / T::of(v.numel() as f64);
                    add_into(&mut grads[x.0], Tensor::full(v.shape().to_vec(), each));
                }
            }
            Op::SumRows(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let k = shape[1];
                    let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
                    add_into(&mut grads[x.0], Tensor::new(shape, d)?);
                }
            }
            Op::ScalarMul(x, c) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.map(|v| v * *c));
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let d = gd.iter().zip(node.value.data()).map(|(&g, &e)| g * e).collect();
                    add_into(&mut grads[x.0], Tensor::new(node.value.shape().to_vec(), d)?);
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let two = T::of(2.0);
                    let d: Vec<T> = gd.iter().zip(node.value.data()).map(|(&g, &s)| g / (two * s)).collect();
                    if d.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "sqrt backward" });
                    }
                    add_into(&mut grads[x.0], Tensor::new(node.value.shape().to_vec(), d)?);
                }
            }
            Op::GaussianStyleCe {
                mu,
                wg,
                labels,
                sigma,
                probs,
            } => {
                let (vmu, vwg) = (self.value(*mu), self.value(*wg));
                let (n, ds) = (vmu.shape()[0], vmu.shape()[1]);
                let k = vwg.shape()[0];
                let w = vwg.data();
                // dz_ij = g_i (p_ij - [j = y_i])
                let mut dz = vec![T::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        dz[i * k + j] = gd[i] * probs[i * k + j];
                    }
                    dz[i * k + labels[i]] = dz[i * k + labels[i]] - gd[i];
                }
                if self.wants(*mu) {
                    let mut d = vec![T::zero(); n * ds];
                    T::gemm(n, k, ds, T::one(), &dz, (k as isize, 1), w, (ds as isize, 1), T::zero(), &mut d, (ds as isize, 1));
                    add_into(&mut grads[mu.0], Tensor::new([n, ds], d)?);
                }
                if self.wants(*wg) {
                    let mut d = vec![T::zero(); k * ds];
                    T::gemm(k, n, ds, T::one(), &dz, (1, k as isize), vmu.data(), (ds as isize, 1), T::zero(), &mut d, (ds as isize, 1));
                    let s2 = *sigma * *sigma;
                    if s2 > T::zero() {
                        for i in 0..n {
                            let y = labels[i];
                            for j in 0..k {
                                let c = gd[i] * probs[i * k + j] * s2;
                                if j == y || c == T::zero() {
                                    continue;
                                }
                                for t in 0..ds {
                                    let diff = c * (w[j * ds + t] - w[y * ds + t]);
                                    d[j * ds + t] = d[j * ds + t] + diff;
                                    d[y * ds + t] = d[y * ds + t] - diff;
                                }
                            }
                        }
                    }
                    add_into(&mut grads[wg.0], Tensor::new([k, ds], d)?);
                }
            }
            Op::CwMargin { logits, grad_pairs } => {
                if self.wants(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let k = shape[1];
                    let mut d = Tensor::zeros(shape);
                    for (i, (pair, &v)) in grad_pairs.iter().zip(gd).enumerate() {
                        if let Some((best, y)) = pair {
                            d.data_mut()[i * k + best] = v;
                            d.data_mut()[i * k + y] = -v;
                        }
                    }
                    add_into(&mut grads[logits.0], d);
                }
            }
        }
        Ok(())
    }
}

/// `sigma^2/2 * |w_i - w_j|^2` for every row pair, as a `k x k` table.
fn pairwise_half_sq_dist<T: Real>(w: &[T], k: usize, ds: usize, sigma: T) -> Vec<T> {
    let half = sigma * sigma / T::of(2.0);
    let mut out = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            let d: T = (0..ds).map(|t| (w[j * ds + t] - w[i * ds + t]).powi(2)).sum();
            out[i * k + j] = half * d;
        }
    }
    out
}

pub(crate) fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::MatMul => "matmul",
        OpKind::Linear => "linear",
        OpKind::Conv2d => "conv2d",
        OpKind::MaxPool2x2 => "maxpool2x2",
        OpKind::Relu => "relu",
        OpKind::Flatten => "flatten",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::Gather => "gather",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::SumRows => "sum_rows",
        OpKind::ScalarMul => "scalar_mul",
        OpKind::Exp => "exp",
        OpKind::Sqrt => "sqrt",
        OpKind::Clamp => "clamp",
        OpKind::Sign => "sign",
        OpKind::GaussianStyleCe => "gaussian_style_ce",
        OpKind::CwMargin => "cw_margin",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = g.constant(Tensor::eye(3));
        let an = g.constant(a.clone());
        let out = g.matmul(i, an).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn log_softmax_of_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3]));
        let out = g.log_softmax(x).unwrap();
        for &v in g.value(out).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([4, 1, 28, 28]));
        let w = g.constant(Tensor::zeros([32, 1, 3, 3]));
        let out = g.conv2d(x, w, None, 0).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 32, 26, 26]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xd: Vec<f64> = (0..2 * 2 * 4 * 5).map(|v| (v as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| (v as f64 * 0.71).cos()).collect();
        let x = g.constant(t(&[2, 2, 4, 5], &xd));
        let w = g.constant(t(&[3, 2, 3, 3], &wd));
        let b = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
        for pad in [0usize, 1] {
            let out = g.conv2d(x, w, Some(b), pad).unwrap();
            let (oh, ow) = (4 + 2 * pad - 2, 5 + 2 * pad - 2);
            assert_eq!(g.value(out).shape(), &[2, 3, oh, ow]);
            let o = g.value(out).data().to_vec();
            for n in 0..2 {
                for f in 0..3 {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = [0.1, -0.2, 0.3][f];
                            for c in 0..2 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let iy = y as isize + ki as isize - pad as isize;
                                        let ix = xo as isize + kj as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                            continue;
                                        }
                                        acc += xd[((n * 2 + c) * 4 + iy as usize) * 5 + ix as usize]
                                            * wd[((f * 2 + c) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                            let got = o[((n * 3 + f) * oh + y) * ow + xo];
                            assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let c = g.constant(t(&[2], &[5., 6.]));
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn second_backward_requires_accumulation() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::TapeConsumed)));

        let mut g = Graph::<f64>::new();
        g.set_accumulate(true);
        let x = g.leaf(t(&[2], &[1., 2.]));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn sign_and_clamp_block_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-0.5, 0.0, 2.0]));
        let s = g.sign(x).unwrap();
        assert_eq!(g.value(s).data(), &[-1., 0., 1.]);
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[0., 0., 1.]);
        let sum = g.add(s, c).unwrap();
        let both = g.add(sum, x).unwrap();
        let loss = g.sum(both).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn cw_margin_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[2, 3], &[5., 1., 0., 1., 5., 0.]));
        let m = g.cw_margin(z, &[0, 0], 0.0).unwrap();
        assert_eq!(g.value(m).data(), &[0., 4.]);
    }
}
