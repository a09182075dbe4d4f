//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in an
//! append-only arena. Parents always have smaller ids than their children,
//! so walking ids in descending order is a valid reverse topological order
//! and each node is visited exactly once during [`Graph::backward`].
//!
//! Every op checks its output for NaN/Inf and fails immediately.

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
    },
    LogSumExp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    Stack(Vec<NodeId>),
    BceWithLogits {
        logits: NodeId,
        targets: Tensor,
        mask: Tensor,
        count: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Minimum row norm accepted by [`Graph::l2_normalize`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, `None` if backward never reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor,
        op: Op,
        op_name: &'static str,
        parents: &[NodeId],
    ) -> Result<NodeId> {
        let value = value.ensure_finite(op_name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let v = self.value(id);
        if v.shape().len() != 2 {
            return Err(Error::dim(
                op,
                format!("expected a matrix, got shape {:?}", v.shape()),
            ));
        }
        Ok((v.rows(), v.cols()))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push_op(
            Tensor::matrix(m, n, out)?,
            Op::MatMul(a, b),
            "matmul",
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims(a, "transpose")?;
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), "transpose", &[a])
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push_op(out, op, name, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`d` bias to every row of an `n x d` matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(a, "add_row_bias")?;
        if self.value(bias).len() != d {
            return Err(Error::dim(
                "add_row_bias",
                format!(
                    "bias has {} entries for {d} columns",
                    self.value(bias).len()
                ),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        self.push_op(
            Tensor::matrix(n, d, data)?,
            Op::AddRowBias(a, bias),
            "add_row_bias",
            &[a, bias],
        )
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * factor).collect(),
        )?;
        self.push_op(out, Op::Scale(a, factor), "scale", &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x.max(0.0)).collect(),
        )?;
        self.push_op(out, Op::Relu(a), "relu", &[a])
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = va.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= MIN_ROW_NORM {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {norm:e}"),
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push_op(
            out,
            Op::L2Normalize { input: a, norms },
            "l2_normalize",
            &[a],
        )
    }

    /// `log(sum(exp(a)))` over all elements, stabilised by the maximum.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::scalar(
            log_sum_exp(va.data()).ok_or_else(|| Error::dim("log_sum_exp", "empty input"))?,
        );
        self.push_op(out, Op::LogSumExp(a), "log_sum_exp", &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push_op(Tensor::scalar(m), Op::Mean(a), "mean", &[a])
    }

    /// Picks elements by flat (row-major) index into a 1-D tensor.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        if indices.is_empty() {
            return Err(Error::dim("gather", "no indices"));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(
                *va.data().get(i).ok_or_else(|| {
                    Error::dim("gather", format!("index {i} out of {}", va.len()))
                })?,
            );
        }
        let out = Tensor::vector(data)?;
        self.push_op(
            out,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            "gather",
            &[a],
        )
    }

    /// Concatenates scalar nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::dim("stack", "no inputs"));
        }
        let mut data = Vec::with_capacity(items.len());
        for &id in items {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::dim(
                    "stack",
                    format!("non-scalar input of shape {:?}", v.shape()),
                ));
            }
            data.push(v.item());
        }
        let out = Tensor::vector(data)?;
        self.push_op(out, Op::Stack(items.to_vec()), "stack", items)
    }

    /// Mean of per-element sigmoid binary cross-entropy over entries where
    /// `mask` is 1. Masked-out entries contribute neither loss nor gradient.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
        mask: &Tensor,
    ) -> Result<NodeId> {
        let x = self.value(logits);
        if x.shape() != targets.shape() || x.shape() != mask.shape() {
            return Err(Error::dim(
                "bce_with_logits",
                format!(
                    "logits {:?}, targets {:?}, mask {:?}",
                    x.shape(),
                    targets.shape(),
                    mask.shape()
                ),
            ));
        }
        let count: f64 = mask.data().iter().sum();
        if count <= 0.0 {
            return Err(Error::Contract(
                "bce_with_logits: every entry is masked".into(),
            ));
        }
        let mut total = 0.0;
        for ((&z, &y), &m) in x.data().iter().zip(targets.data()).zip(mask.data()) {
            if m != 0.0 {
                total += m * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
            }
        }
        let out = Tensor::scalar(total / count);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.clone(),
            mask: mask.clone(),
            count,
        };
        self.push_op(out, op, "bce_with_logits", &[logits])
    }

    /// Back-propagates from a scalar root, adding this pass's gradients onto
    /// whatever earlier passes left behind.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut pass: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pass[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = pass[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut pass)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(upstream.data()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, pass: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let bt = vb.transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    self.accumulate(pass, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let at = va.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(pass, *b, &db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(pass, *a, g.transpose().data());
            }
            Op::Add(a, b) => {
                self.accumulate(pass, *a, g.data());
                self.accumulate(pass, *b, g.data());
            }
            Op::Sub(a, b) => {
                self.accumulate(pass, *a, g.data());
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                self.accumulate(pass, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                self.accumulate(pass, *a, &da);
                self.accumulate(pass, *b, &db);
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(pass, *a, g.data());
                let d = g.cols();
                let mut db = vec![0.0; d];
                for row in g.data().chunks_exact(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(pass, *bias, &db);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
                self.accumulate(pass, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(pass, *a, &da);
            }
            Op::L2Normalize { input, norms } => {
                // dx = (g - y (y . g)) / |x|
                let y = &node.value;
                let d = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
                }
                self.accumulate(pass, *input, &dx);
            }
            Op::LogSumExp(a) => {
                let out = node.value.item();
                let gv = g.item();
                let da: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|x| gv * (x - out).exp())
                    .collect();
                self.accumulate(pass, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g.item(); self.value(*a).len()];
                self.accumulate(pass, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![g.item() / n as f64; n];
                self.accumulate(pass, *a, &da);
            }
            Op::Gather { input, indices } => {
                if self.nodes[input.0].requires_grad {
                    let buf = slot(pass, *input, self.value(*input).shape());
                    let data = buf.data_mut();
                    for (&i, gv) in indices.iter().zip(g.data()) {
                        data[i] += gv;
                    }
                }
            }
            Op::Stack(items) => {
                for (&id, gv) in items.iter().zip(g.data()) {
                    self.accumulate(pass, id, &[*gv]);
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let gv = g.item();
                let dx: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(mask.data())
                    .map(|((&z, &y), &m)| gv * m * (sigmoid(z) - y) / count)
                    .collect();
                self.accumulate(pass, *logits, &dx);
            }
        }
        Ok(())
    }

    fn accumulate(&self, pass: &mut [Option<Tensor>], target: NodeId, contribution: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = slot(pass, target, self.value(target).shape());
        for (a, b) in buf.data_mut().iter_mut().zip(contribution) {
            *a += b;
        }
    }
}

fn slot<'a>(pass: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    pass[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted `log(sum(exp(xs)))`; `None` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> Option<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xs.is_empty() {
        return None;
    }
    if max == f64::NEG_INFINITY {
        return Some(max);
    }
    Some(max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}
