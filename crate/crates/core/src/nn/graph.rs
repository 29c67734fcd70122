use std::rc::Rc;

use super::kernels;
use super::{NnError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    Gelu(NodeId),
    Gather(NodeId, Vec<usize>),
    CrossEntropy(NodeId, Vec<usize>),
    Sum(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather(..) => "gather",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of tensor operations. Inputs of every node refer to
/// earlier nodes, so construction order is a topological order and
/// [`Graph::backward`] simply walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; all zeros if the loss does
    /// not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds the gradient of `id` into `acc`, scaled by `factor`.
    pub fn accumulate_into(&self, id: NodeId, acc: &mut Tensor, factor: f64) {
        if let Some(g) = &self.grads[id.0] {
            for (a, v) in acc.data_mut().iter_mut().zip(g) {
                *a += factor * v;
            }
        }
    }
}

fn shape2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
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

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId]) -> NnError {
        NnError::ShapeMismatch {
            op,
            shapes: ids
                .iter()
                .map(|i| self.nodes[i.0].value.shape().to_vec())
                .collect(),
        }
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), NnError> {
        shape2(self.value(id)).ok_or_else(|| self.mismatch(op, &[id]))
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    /// `[m×k] · [n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), v, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(Op::Transpose(a), v, ng))
    }

    /// Elementwise sum of equal-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let v = self.row_broadcast("add_row", x, bias, |a, b| a + b)?;
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), v, ng))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    /// Multiplies every row of a `[.., d]` tensor by a `[d]` vector.
    pub fn mul_row(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, NnError> {
        let v = self.row_broadcast("mul_row", x, gain, |a, b| a * b)?;
        let ng = self.ng(&[x, gain]);
        Ok(self.push(Op::MulRow(x, gain), v, ng))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        x: NodeId,
        r: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        let xv = self.value(x);
        let rv = self.value(r);
        if xv.shape().is_empty() || rv.shape() != [xv.cols()] {
            return Err(self.mismatch(op, &[x, r]));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rv.data()[i % c]))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(Op::Scale(x, factor), v, ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last dimension of a `[r × c]` tensor restricted to
    /// entries where `allowed[i*c + j]` holds; other entries become exact
    /// zeros. Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: Rc<[bool]>) -> Result<NodeId, NnError> {
        if allowed.len() != self.value(x).numel() {
            return Err(NnError::MaskLength {
                expected: self.value(x).numel(),
                got: allowed.len(),
            });
        }
        let c = self.value(x).cols();
        if allowed.chunks(c).any(|row| !row.contains(&true)) {
            return Err(NnError::EmptyMaskRow);
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: NodeId, allowed: Option<Rc<[bool]>>) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(self.mismatch("softmax", &[x]));
        }
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (r, (orow, xrow)) in out.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
            let mask = allowed.as_ref().map(|m| &m[r * c..(r + 1) * c]);
            kernels::softmax_row(xrow, mask, orow);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::Softmax(x), v, ng))
    }

    /// Per-row standardization over the last dimension (no affine part).
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(self.mismatch("layer_norm", &[x]));
        }
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        let mut invs = Vec::with_capacity(xv.rows());
        for (orow, xrow) in out.chunks_mut(c).zip(xv.data().chunks(c)) {
            invs.push(kernels::layer_norm_row(xrow, orow));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::LayerNorm(x, invs), v, ng))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(Op::Gelu(x), v, ng)
    }

    /// Embedding lookup: selects rows of a `[n × d]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NnError> {
        let (n, d) = self.dims2("gather", table)?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(NnError::IndexOutOfRange { index: i, len: n });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(Op::Gather(table, ids.to_vec()), v, ng))
    }

    /// Mean cross-entropy of `[n × V]` logits against `n` class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NnError> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n || n == 0 {
            return Err(NnError::TargetCount {
                rows: n,
                targets: targets.len(),
            });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(NnError::IndexOutOfRange { index: t, len: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            total += kernels::log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), out, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    /// Columns `start..end` of a `[r × c]` matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NnError> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start >= end || end > c {
            return Err(self.mismatch("slice_cols", &[x]));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let v = Tensor::new(vec![r, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(Op::SliceCols(x, start, end), v, ng))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2("concat_cols", p)?);
        }
        let r = dims.first().map(|d| d.0).ok_or(NnError::EmptyConcat)?;
        if dims.iter().any(|d| d.0 != r) {
            return Err(self.mismatch("concat_cols", parts));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![r, total], out)?;
        let ng = self.ng(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, ng))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2("concat_rows", p)?);
        }
        let c = dims.first().map(|d| d.1).ok_or(NnError::EmptyConcat)?;
        if dims.iter().any(|d| d.1 != c) {
            return Err(self.mismatch("concat_rows", parts));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, c], out)?;
        let ng = self.ng(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, ng))
    }

    /// Reverse-mode sweep from a scalar `loss`, visiting nodes in exact
    /// reverse construction order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        // Accumulation buffer for an input, created zeroed on first use.
        fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a)).unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, val(*b).data(), ga, m, n, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = dC · B, dB = dCᵀ · A
                let (m, k) = shape2(val(*a)).unwrap();
                let n = val(*b).rows();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_acc(g, val(*b).data(), ga, m, n, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    kernels::matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = shape2(val(*a)).unwrap();
                let ga = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        let gi = slot(grads, id, g.len());
                        for (x, y) in gi.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                if wants(*b) {
                    let c = val(*b).numel();
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::MulRow(x, r) => {
                let c = val(*r).numel();
                if wants(*x) {
                    let rv = val(*r).data();
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * rv[i % c];
                    }
                }
                if wants(*r) {
                    let xv = val(*x).data();
                    let gr = slot(grads, *r, c);
                    for i in 0..g.len() {
                        gr[i % c] += g[i] * xv[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                let gx = slot(grads, *x, g.len());
                for (a, v) in gx.iter_mut().zip(g) {
                    *a += f * v;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm(x, invs) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for (r, ((yr, gr), dr)) in
                    y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate()
                {
                    kernels::layer_norm_row_backward(yr, invs[r], gr, dr);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            }
            Op::Gather(t, ids) => {
                let (n, d) = shape2(val(*t)).unwrap();
                let gt = slot(grads, *t, n * d);
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::CrossEntropy(l, targets) => {
                let (n, v) = shape2(val(*l)).unwrap();
                let lv = val(*l).data();
                let scale = g[0] / n as f64;
                let gl = slot(grads, *l, n * v);
                let mut probs = vec![0.0; v];
                for (r, &t) in targets.iter().enumerate() {
                    kernels::softmax_row(&lv[r * v..(r + 1) * v], None, &mut probs);
                    for j in 0..v {
                        gl[r * v + j] += scale * probs[j];
                    }
                    gl[r * v + t] -= scale;
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                let gx = slot(grads, *x, n);
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }
            Op::SliceCols(x, start, end) => {
                let (r, c) = shape2(val(*x)).unwrap();
                let w = end - start;
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let gp = slot(grads, p, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        let gp = slot(grads, p, n);
                        for (a, v) in gp.iter_mut().zip(&g[off..off + n]) {
                            *a += v;
                        }
                    }
                    off += n;
                }
            }
        }
    }
}
