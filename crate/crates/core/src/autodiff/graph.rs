//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly when it is pushed, so a graph doubles as a
//! record of all intermediate values. Nodes can be *tapped* under a name;
//! taps only label existing nodes and never change the arithmetic.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

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
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    MulRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddScalar(NodeId),
    Softmax(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    LayerNorm { x: NodeId, rstd: Vec<f64> },
    RepeatRows { x: NodeId, times: usize },
    SliceCols { x: NodeId, start: usize },
    Gather { x: NodeId, index: Vec<usize> },
    Reshape(NodeId),
    Embedding { table: NodeId, rows: Vec<usize> },
    Sum(NodeId),
    SumSquares(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if the node lies on a
    /// differentiable path to the loss.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    taps: BTreeMap<String, NodeId>,
}

/// Standard normal CDF, exact erf form.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// GELU with the exact erf formulation, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided index of
    // the m×k, k×n and m×n operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn b_strides(k: usize, n: usize, trans_b: bool) -> (isize, isize) {
    if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    }
}

fn softmax_rows(x: &[f64], width: usize, out: &mut [f64]) {
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
}

/// Softmax along the last axis of `x`.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
    let mut out = vec![0.0; x.numel()];
    softmax_rows(x.data(), width, &mut out);
    Tensor::new(x.shape().to_vec(), out)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Labels an existing node so callers can find it after evaluation.
    pub fn tap(&mut self, name: impl Into<String>, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("tap on unknown node {}", id.0)));
        }
        self.taps.insert(name.into(), id);
        Ok(())
    }

    pub fn tapped(&self, name: &str) -> Option<NodeId> {
        self.taps.get(name).copied()
    }

    pub fn taps(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.taps.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; gradients flow back to it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dimension(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(id) {
            [b, m, n] => Ok((*b, *m, *n)),
            s => Err(Error::Dimension(format!(
                "{what} expects a rank-3 tensor, got {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`, or `a · bᵀ` for `b[n×k]` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (b0, b1) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {k} and {kb} disagree"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            b_strides(k, n, trans_b),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false)
    }

    /// Per-batch matrix product of rank-3 tensors.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ba, m, k) = self.dims3(a, "batch_matmul")?;
        let (bb, b1, b2) = self.dims3(b, "batch_matmul")?;
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ba != bb || k != kb {
            return Err(Error::Dimension(format!(
                "batch_matmul shapes {:?} and {:?} disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                (k as isize, 1),
                &bv[i * k * n..],
                b_strides(k, n, trans_b),
                0.0,
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        x: NodeId,
        row: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let width = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Dimension(format!("{what} on a scalar")))?;
        if self.shape(row) != [width] {
            return Err(Error::Dimension(format!(
                "{what}: row of shape {:?} does not match trailing width {width}",
                self.shape(row)
            )));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(width)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&v, &w)| f(v, w)))
            .collect();
        Tensor::new(self.shape(x).to_vec(), data)
    }

    /// Adds a vector to every row (bias broadcast).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::AddRow { x, row }, rg))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::MulRow { x, row }, rg))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("map preserves shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.map(x, |a| a * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: NodeId, value: f64) -> NodeId {
        self.map(x, |a| a + value, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.map(x, |a| a * sigmoid(a), Op::Silu(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let value = softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let width = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / width.max(1));
        for (row, dst) in src.chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, rstd }, rg))
    }

    /// Layer norm followed by a per-feature affine map.
    pub fn layer_norm_affine(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let n = self.layer_norm(x, eps)?;
        let s = self.mul_row(n, scale)?;
        self.add_row(s, shift)
    }

    /// `x · wᵀ + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul_ext(x, w, true)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Repeats each row of a matrix `times` times consecutively.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "repeat_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n * times);
        for row in src.chunks(n.max(1)).take(m) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![m * times, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RepeatRows { x, times }, rg))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "columns {start}..{} exceed width {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n).take(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`; used for fixed permutations.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            if r >= vocab {
                return Err(Error::Domain(format!(
                    "embedding row {r} out of range for table of {vocab}"
                )));
            }
            out.extend_from_slice(&src[r * dim..(r + 1) * dim]);
        }
        let value = Tensor::new(vec![rows.len(), dim], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumSquares(x), rg)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown loss node {}", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.rg(id) {
            return None;
        }
        let n = self.value(id).numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let bs = b_strides(k, n, *trans_b);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (bs.1, bs.0),
                        1.0,
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        gb,
                        bs,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1], s[2])
                };
                let n = node.value.shape()[2];
                let bs = b_strides(k, n, *trans_b);
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n as isize, 1),
                            &bv[i * k * n..],
                            (bs.1, bs.0),
                            1.0,
                            &mut ga[i * m * k..],
                            (k as isize, 1),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            1.0,
                            &mut gb[i * k * n..],
                            bs,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(s) = self.slot(grads, id) {
                        s.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(s) = self.slot(grads, id) {
                        s.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    let other = self.value(*b).data();
                    for ((d, v), o) in s.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    let other = self.value(*a).data();
                    for ((d, v), o) in s.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(s) = self.slot(grads, *row) {
                    let w = s.len();
                    for chunk in g.chunks(w) {
                        s.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let w = self.value(*row).numel();
                if let Some(s) = self.slot(grads, *x) {
                    let r = self.value(*row).data();
                    for (dchunk, gchunk) in s.chunks_mut(w).zip(g.chunks(w)) {
                        for ((d, v), rv) in dchunk.iter_mut().zip(gchunk).zip(r) {
                            *d += v * rv;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *row) {
                    let xv = self.value(*x).data();
                    for (gchunk, xchunk) in g.chunks(w).zip(xv.chunks(w)) {
                        for ((d, v), xx) in s.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += v * xx;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Softmax(x) => {
                let w = *node.value.shape().last().expect("softmax rank");
                if let Some(s) = self.slot(grads, *x) {
                    for ((dchunk, gchunk), ychunk) in
                        s.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w))
                    {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let xv = self.value(*x).data();
                    for ((d, v), &a) in s.iter_mut().zip(g).zip(xv) {
                        *d += v * gelu_grad(a);
                    }
                }
            }
            Op::Silu(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let xv = self.value(*x).data();
                    for ((d, v), &a) in s.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(a);
                        *d += v * sg * (1.0 + a * (1.0 - sg));
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let w = *node.value.shape().last().expect("layer_norm rank");
                if let Some(s) = self.slot(grads, *x) {
                    for (((dchunk, gchunk), ychunk), r) in s
                        .chunks_mut(w)
                        .zip(g.chunks(w))
                        .zip(out.chunks(w))
                        .zip(rstd)
                    {
                        let mean_g = gchunk.iter().sum::<f64>() / w as f64;
                        let mean_gy =
                            gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for ((d, gv), y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += r * (gv - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                if let Some(s) = self.slot(grads, *x) {
                    let n = *self.shape(*x).last().expect("matrix");
                    for (row, dst) in s.chunks_mut(n.max(1)).enumerate() {
                        for rep in 0..*times {
                            let off = (row * times + rep) * n;
                            dst.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(s) = self.slot(grads, *x) {
                    let n = self.shape(*x)[1];
                    let len = node.value.shape()[1];
                    for (dst, src) in s.chunks_mut(n).zip(g.chunks(len.max(1))) {
                        dst[*start..start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&i, v) in index.iter().zip(g) {
                        s[i] += v;
                    }
                }
            }
            Op::Embedding { table, rows } => {
                if let Some(s) = self.slot(grads, *table) {
                    let dim = self.shape(*table)[1];
                    for (j, &r) in rows.iter().enumerate() {
                        s[r * dim..(r + 1) * dim]
                            .iter_mut()
                            .zip(&g[j * dim..(j + 1) * dim])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let xv = self.value(*x).data();
                    for (d, &a) in s.iter_mut().zip(xv) {
                        *d += 2.0 * a * g[0];
                    }
                }
            }
        }
    }
}
