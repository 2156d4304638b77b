//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation either runs detached (no input carries a node id) or
//! appends a node holding the intermediates its backward rule needs. The
//! primitive set is sized to the models and losses of this crate: dense and
//! convolutional layers, softmax-family activations, reductions, clipping,
//! index gathers and a logit-margin loss for attack objectives.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{NodeId, Tensor};

/// One recorded primitive application with saved intermediates.
enum Back {
    Leaf,
    Add { a: In, b: In },
    /// bias [k] broadcast over the rows of an [n, k] matrix
    AddRowBias { a: In, b: In, cols: usize },
    /// bias [c] broadcast over an NCHW activation
    AddChanBias { a: In, b: In, n: usize, c: usize, hw: usize },
    Sub { a: In, b: In },
    Mul { a: In, b: In, av: Vec<f64>, bv: Vec<f64> },
    Scale { a: In, k: f64 },
    MatMul { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, m: usize, k: usize, n: usize },
    Conv2d { x: In, w: In, xv: Vec<f64>, wv: Vec<f64>, dims: ConvDims },
    Relu { a: In, av: Vec<f64> },
    Log { a: In, av: Vec<f64> },
    Exp { a: In, out: Vec<f64> },
    Softmax { a: In, out: Vec<f64>, row: usize },
    LogSoftmax { a: In, out: Vec<f64>, row: usize },
    Sum { a: In, len: usize },
    Mean { a: In, len: usize },
    Clip { a: In, av: Vec<f64>, lo: f64, hi: f64 },
    /// picks element `idx[i]` from row i of an [n, k] matrix
    Gather { a: In, idx: Vec<usize>, cols: usize },
    /// global average over the spatial dims of NCHW
    AvgPool { a: In, n: usize, c: usize, hw: usize },
    Reshape { a: In },
    /// -(1/n) sum_i max(z_y - max_{k != y} z_k, -kappa); saved per-example
    /// (true, runner-up) index pair for active examples, None when clamped
    CwMargin { a: In, active: Vec<Option<(usize, usize)>>, n: usize, cols: usize },
}

type In = Option<NodeId>;

struct Node {
    shape: Vec<usize>,
    back: Back,
}

/// Gradients keyed by the node id of the tensor they differentiate.
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or a zero tensor of the given shape when the node
    /// does not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// A single-threaded computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, back: Back) -> NodeId {
        self.nodes.push(Node { shape, back });
        self.nodes.len() - 1
    }

    /// Record a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(t.shape().to_vec(), Back::Leaf);
        t.detached().with_node(id)
    }

    fn any_recorded(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.node().is_some())
    }

    /// Elementwise addition; also accepts a trailing-dim or channel bias.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() == b.shape() {
            let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            let mut out = Tensor::new(a.shape().to_vec(), data)?;
            if Self::any_recorded(&[a, b]) {
                let id = self.push(out.shape().to_vec(), Back::Add { a: a.node(), b: b.node() });
                out = out.with_node(id);
            }
            return Ok(out);
        }
        // [n, k] + [k]
        if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for r in data.chunks_mut(cols) {
                for (v, bv) in r.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            let mut out = Tensor::new(a.shape().to_vec(), data)?;
            if Self::any_recorded(&[a, b]) {
                let id = self.push(
                    out.shape().to_vec(),
                    Back::AddRowBias { a: a.node(), b: b.node(), cols },
                );
                out = out.with_node(id);
            }
            return Ok(out);
        }
        // [n, c, h, w] + [c]
        if a.shape().len() == 4 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let hw = a.shape()[2] * a.shape()[3];
            let mut data = a.data().to_vec();
            for nb in 0..n {
                for (ch, &bv) in b.data().iter().enumerate() {
                    let base = (nb * c + ch) * hw;
                    for v in &mut data[base..base + hw] {
                        *v += bv;
                    }
                }
            }
            let mut out = Tensor::new(a.shape().to_vec(), data)?;
            if Self::any_recorded(&[a, b]) {
                let id = self.push(
                    out.shape().to_vec(),
                    Back::AddChanBias { a: a.node(), b: b.node(), n, c, hw },
                );
                out = out.with_node(id);
            }
            return Ok(out);
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data)?;
        if Self::any_recorded(&[a, b]) {
            let id = self.push(out.shape().to_vec(), Back::Sub { a: a.node(), b: b.node() });
            out = out.with_node(id);
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data)?;
        if Self::any_recorded(&[a, b]) {
            let id = self.push(
                out.shape().to_vec(),
                Back::Mul {
                    a: a.node(),
                    b: b.node(),
                    av: a.data().to_vec(),
                    bv: b.data().to_vec(),
                },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: &Tensor, k: f64) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x * k).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        if a.node().is_some() {
            let id = self.push(out.shape().to_vec(), Back::Scale { a: a.node(), k });
            out = out.with_node(id);
        }
        out
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let mut out = Tensor::new(vec![m, n], data)?;
        if Self::any_recorded(&[a, b]) {
            let id = self.push(
                out.shape().to_vec(),
                Back::MatMul {
                    a: a.node(),
                    b: b.node(),
                    av: a.data().to_vec(),
                    bv: b.data().to_vec(),
                    m,
                    k,
                    n,
                },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    /// Stride-1 zero-padded convolution; x is NCHW, w is [co, ci, kh, kw].
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if w.shape()[2] != w.shape()[3] || w.shape()[2] % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: w.shape().to_vec(),
                reason: "kernel must be square with odd extent".into(),
            });
        }
        let dims = ConvDims {
            n: x.shape()[0],
            ci: x.shape()[1],
            h: x.shape()[2],
            w: x.shape()[3],
            co: w.shape()[0],
            kh: w.shape()[2],
            kw: w.shape()[3],
        };
        let data = kernels::conv2d(x.data(), w.data(), dims);
        let mut out = Tensor::new(vec![dims.n, dims.co, dims.h, dims.w], data)?;
        if Self::any_recorded(&[x, w]) {
            let id = self.push(
                out.shape().to_vec(),
                Back::Conv2d {
                    x: x.node(),
                    w: w.node(),
                    xv: x.data().to_vec(),
                    wv: w.data().to_vec(),
                    dims,
                },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Relu { a: a.node(), av: a.data().to_vec() },
            );
            out = out.with_node(id);
        }
        out
    }

    /// Natural log; callers must clamp probabilities to positive values first.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        if let Some((i, &v)) = a.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::LogDomain { value: v, index: i });
        }
        let data: Vec<f64> = a.data().iter().map(|x| x.ln()).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data)?;
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Log { a: a.node(), av: a.data().to_vec() },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data.clone()).expect("same shape");
        if a.node().is_some() {
            let id = self.push(out.shape().to_vec(), Back::Exp { a: a.node(), out: data });
            out = out.with_node(id);
        }
        out
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let row = self.last_axis(a, "softmax")?;
        let data = kernels::softmax_rows(a.data(), row);
        let mut out = Tensor::new(a.shape().to_vec(), data.clone())?;
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Softmax { a: a.node(), out: data, row },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let row = self.last_axis(a, "log_softmax")?;
        let data = kernels::log_softmax_rows(a.data(), row);
        let mut out = Tensor::new(a.shape().to_vec(), data.clone())?;
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::LogSoftmax { a: a.node(), out: data, row },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    fn last_axis(&self, a: &Tensor, op: &'static str) -> Result<usize> {
        match a.shape().last() {
            Some(&r) if r > 0 => Ok(r),
            _ => Err(Error::InvalidShape {
                op,
                shape: a.shape().to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        let mut out = Tensor::scalar(s);
        if a.node().is_some() {
            let id = self.push(
                vec![],
                Back::Sum { a: a.node(), len: a.numel() },
            );
            out = out.with_node(id);
        }
        out
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
        let mut out = Tensor::scalar(s);
        if a.node().is_some() {
            let id = self.push(
                vec![],
                Back::Mean { a: a.node(), len: a.numel() },
            );
            out = out.with_node(id);
        }
        out
    }

    /// Elementwise clip to [lo, hi]; gradient passes through strictly inside
    /// the interval and is zero at and beyond the bounds.
    pub fn clip(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let mut out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Clip { a: a.node(), av: a.data().to_vec(), lo, hi },
            );
            out = out.with_node(id);
        }
        out
    }

    /// Gather one element per row of an [n, k] matrix: out[i] = a[i, idx[i]].
    pub fn gather(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if a.shape().len() != 2 || a.shape()[0] != idx.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: a.shape().to_vec(),
                reason: format!("expected [{}, k] input", idx.len()),
            });
        }
        let cols = a.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {cols} columns"
            )));
        }
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| a.data()[r * cols + c])
            .collect();
        let mut out = Tensor::new(vec![idx.len()], data)?;
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Gather { a: a.node(), idx: idx.to_vec(), cols },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    /// Global average pooling over the spatial dims: NCHW -> [n, c].
    pub fn global_avg_pool(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: a.shape().to_vec(),
                reason: "expected NCHW".into(),
            });
        }
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let hw = a.shape()[2] * a.shape()[3];
        let mut data = vec![0.0; n * c];
        for (i, chunk) in a.data().chunks(hw).enumerate() {
            data[i] = chunk.iter().sum::<f64>() / hw as f64;
        }
        let mut out = Tensor::new(vec![n, c], data)?;
        if a.node().is_some() {
            let id = self.push(out.shape().to_vec(), Back::AvgPool { a: a.node(), n, c, hw });
            out = out.with_node(id);
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let mut out = a.reshaped(shape)?;
        if a.node().is_some() {
            let id = self.push(
                out.shape().to_vec(),
                Back::Reshape { a: a.node() },
            );
            out = out.with_node(id);
        }
        Ok(out)
    }

    /// Margin loss used inside PGD: -(1/n) sum_i max(z_y - max_{k!=y} z_k, 0).
    /// Maximizing this drives the true-class margin negative.
    pub fn cw_margin(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
            return Err(Error::InvalidShape {
                op: "cw_margin",
                shape: logits.shape().to_vec(),
                reason: format!("expected [{}, k] logits", targets.len()),
            });
        }
        let cols = logits.shape()[1];
        if cols < 2 {
            return Err(Error::InvalidArgument(
                "cw_margin needs at least 2 classes".into(),
            ));
        }
        let n = targets.len();
        let mut total = 0.0;
        let mut active = Vec::with_capacity(n);
        for (i, &y) in targets.iter().enumerate() {
            if y >= cols {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {cols} classes"
                )));
            }
            let row = &logits.data()[i * cols..(i + 1) * cols];
            let (mut best_k, mut best_v) = (usize::MAX, f64::NEG_INFINITY);
            for (k, &v) in row.iter().enumerate() {
                if k != y && v > best_v {
                    best_v = v;
                    best_k = k;
                }
            }
            let margin = row[y] - best_v;
            if margin > 0.0 {
                total += margin;
                active.push(Some((y, best_k)));
            } else {
                active.push(None);
            }
        }
        let mut out = Tensor::scalar(-total / n as f64);
        if logits.node().is_some() {
            let id = self.push(vec![], Back::CwMargin { a: logits.node(), active, n, cols });
            out = out.with_node(id);
        }
        Ok(out)
    }

    /// Exact reverse-mode gradients of a recorded scalar loss with respect to
    /// the requested nodes. Repeated calls on the same record are identical.
    pub fn backward(&self, loss: &Tensor, wrt: &[NodeId]) -> Result<GradientMap> {
        let loss_id = match loss.node() {
            Some(id) if loss.is_scalar() => id,
            Some(_) => return Err(Error::NonScalarLoss(loss.shape().to_vec())),
            None => return Err(Error::NonScalarLoss(loss.shape().to_vec())),
        };
        if loss_id >= self.nodes.len() {
            return Err(Error::UnknownNode(loss_id));
        }
        for &id in wrt {
            if id >= self.nodes.len() {
                return Err(Error::UnknownNode(id));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut out = HashMap::new();
        for &id in wrt {
            if let Some(g) = &grads[id] {
                out.insert(id, Tensor::new(self.nodes[id].shape.clone(), g.clone())?);
            } else {
                out.insert(id, Tensor::zeros(self.nodes[id].shape.clone()));
            }
        }
        Ok(GradientMap { grads: out })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], target: In, contribution: impl FnOnce(&mut Vec<f64>), size: usize) {
        if let Some(id) = target {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; size]);
            contribution(slot);
        }
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let size_of = |inp: In| -> usize {
            inp.map(|i| self.nodes[i].shape.iter().product()).unwrap_or(0)
        };
        match &self.nodes[id].back {
            Back::Leaf => {}
            Back::Add { a, b } => {
                Self::accumulate(grads, *a, |s| add_into(s, g), size_of(*a));
                Self::accumulate(grads, *b, |s| add_into(s, g), size_of(*b));
            }
            Back::AddRowBias { a, b, cols } => {
                Self::accumulate(grads, *a, |s| add_into(s, g), size_of(*a));
                Self::accumulate(
                    grads,
                    *b,
                    |s| {
                        for r in g.chunks(*cols) {
                            for (sv, gv) in s.iter_mut().zip(r) {
                                *sv += gv;
                            }
                        }
                    },
                    size_of(*b),
                );
            }
            Back::AddChanBias { a, b, n, c, hw } => {
                Self::accumulate(grads, *a, |s| add_into(s, g), size_of(*a));
                Self::accumulate(
                    grads,
                    *b,
                    |s| {
                        for nb in 0..*n {
                            for ch in 0..*c {
                                let base = (nb * c + ch) * hw;
                                s[ch] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    },
                    size_of(*b),
                );
            }
            Back::Sub { a, b } => {
                Self::accumulate(grads, *a, |s| add_into(s, g), size_of(*a));
                Self::accumulate(
                    grads,
                    *b,
                    |s| {
                        for (sv, gv) in s.iter_mut().zip(g) {
                            *sv -= gv;
                        }
                    },
                    size_of(*b),
                );
            }
            Back::Mul { a, b, av, bv } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(bv) {
                            *sv += gv * xv;
                        }
                    },
                    size_of(*a),
                );
                Self::accumulate(
                    grads,
                    *b,
                    |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(av) {
                            *sv += gv * xv;
                        }
                    },
                    size_of(*b),
                );
            }
            Back::Scale { a, k } => {
                let k = *k;
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for (sv, gv) in s.iter_mut().zip(g) {
                            *sv += gv * k;
                        }
                    },
                    size_of(*a),
                );
            }
            Back::MatMul { a, b, av, bv, m, k, n } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| kernels::matmul_backward_a(g, bv, s, *m, *k, *n),
                    size_of(*a),
                );
                Self::accumulate(
                    grads,
                    *b,
                    |s| kernels::matmul_backward_b(g, av, s, *m, *k, *n),
                    size_of(*b),
                );
            }
            Back::Conv2d { x, w, xv, wv, dims } => {
                Self::accumulate(
                    grads,
                    *x,
                    |s| kernels::conv2d_backward_input(g, wv, s, *dims),
                    size_of(*x),
                );
                Self::accumulate(
                    grads,
                    *w,
                    |s| kernels::conv2d_backward_weight(g, xv, s, *dims),
                    size_of(*w),
                );
            }
            Back::Relu { a, av } => {
                // subgradient 0 at exactly 0
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(av) {
                            if *xv > 0.0 {
                                *sv += gv;
                            }
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Log { a, av } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(av) {
                            *sv += gv / xv;
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Exp { a, out } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((sv, gv), ov) in s.iter_mut().zip(g).zip(out) {
                            *sv += gv * ov;
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Softmax { a, out, row } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((srow, grow), orow) in
                            s.chunks_mut(*row).zip(g.chunks(*row)).zip(out.chunks(*row))
                        {
                            let dot: f64 = grow.iter().zip(orow).map(|(gv, ov)| gv * ov).sum();
                            for ((sv, gv), ov) in srow.iter_mut().zip(grow).zip(orow) {
                                *sv += ov * (gv - dot);
                            }
                        }
                    },
                    size_of(*a),
                );
            }
            Back::LogSoftmax { a, out, row } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((srow, grow), orow) in
                            s.chunks_mut(*row).zip(g.chunks(*row)).zip(out.chunks(*row))
                        {
                            let gsum: f64 = grow.iter().sum();
                            for ((sv, gv), ov) in srow.iter_mut().zip(grow).zip(orow) {
                                *sv += gv - ov.exp() * gsum;
                            }
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Sum { a, len } => {
                let gv = g[0];
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for sv in s.iter_mut() {
                            *sv += gv;
                        }
                    },
                    *len,
                );
            }
            Back::Mean { a, len } => {
                let gv = g[0] / *len as f64;
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for sv in s.iter_mut() {
                            *sv += gv;
                        }
                    },
                    *len,
                );
            }
            Back::Clip { a, av, lo, hi } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for ((sv, gv), xv) in s.iter_mut().zip(g).zip(av) {
                            if *xv > *lo && *xv < *hi {
                                *sv += gv;
                            }
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Gather { a, idx, cols } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for (r, &c) in idx.iter().enumerate() {
                            s[r * cols + c] += g[r];
                        }
                    },
                    size_of(*a),
                );
            }
            Back::AvgPool { a, n, c, hw } => {
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for i in 0..n * c {
                            let gv = g[i] / *hw as f64;
                            for sv in &mut s[i * hw..(i + 1) * hw] {
                                *sv += gv;
                            }
                        }
                    },
                    size_of(*a),
                );
            }
            Back::Reshape { a } => {
                Self::accumulate(grads, *a, |s| add_into(s, g), size_of(*a));
            }
            Back::CwMargin { a, active, n, cols } => {
                let scale = -g[0] / *n as f64;
                Self::accumulate(
                    grads,
                    *a,
                    |s| {
                        for (i, pair) in active.iter().enumerate() {
                            if let Some((y, k)) = pair {
                                s[i * cols + y] += scale;
                                s[i * cols + k] -= scale;
                            }
                        }
                    },
                    size_of(*a),
                );
            }
        }
        Ok(())
    }
}

fn add_into(s: &mut [f64], g: &[f64]) {
    for (sv, gv) in s.iter_mut().zip(g) {
        *sv += gv;
    }
}

/// Compare an analytic gradient against central finite differences.
///
/// Returns the max over coordinates of |analytic - central| / max(1, |analytic|).
/// Coordinates where the one-sided differences disagree (kinks, e.g. relu at
/// exactly 0) are excluded from the max.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.numel() {
        return Err(Error::InvalidArgument(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut worst = 0.0f64;
    let base = x.detached();
    for i in 0..x.numel() {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut xp = base.clone();
            xp.data_mut()[i] += delta;
            let v = f(&xp)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite_diff_check at coordinate {i}"),
                });
            }
            Ok(v)
        };
        let fp = probe(h)?;
        let fm = probe(-h)?;
        let f0 = probe(0.0)?;
        let d_forward = (fp - f0) / h;
        let d_backward = (f0 - fm) / h;
        // one-sided slopes disagreeing flags a kink; skip the coordinate
        if (d_forward - d_backward).abs() > 1e-3 * (1.0 + d_forward.abs() + d_backward.abs()) {
            continue;
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
