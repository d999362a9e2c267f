//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes created with
//! [`Tape::param`] (and everything computed from them) take part in the
//! backward pass; [`Tape::constant`] nodes do not.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulRow(NodeId, NodeId),
    MulConst(NodeId, Matrix<T>),
    Gelu(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    Im2Col {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    GatherRows(NodeId, Vec<usize>),
    ReplaceRows {
        x: NodeId,
        fill: NodeId,
        rows: Vec<usize>,
    },
    MeanRows(NodeId),
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
    CccLoss {
        pred: NodeId,
        truth: Vec<T>,
    },
    Sum(Vec<NodeId>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.grads[id.0].take()
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 x d` row `r` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        let row = self.value(r);
        assert_eq!(row.rows(), 1, "add_row expects a single row");
        assert_eq!(row.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut v = self.value(x).clone();
        let row = row.as_slice().to_vec();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(&row) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, r), &[x, r])
    }

    /// Multiplies every row of `x` elementwise by the `1 x d` row `r`.
    pub fn mul_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        let row = self.value(r).as_slice().to_vec();
        assert_eq!(row.len(), self.value(x).cols(), "mul_row width mismatch");
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(&row) {
                *o *= b;
            }
        }
        self.push(v, Op::MulRow(x, r), &[x, r])
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: NodeId, mask: Matrix<T>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape(), "mul_const shape mismatch");
        let mut v = self.value(x).clone();
        for (o, &m) in v.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *o *= m;
        }
        self.push(v, Op::MulConst(x, mask), &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Per-row normalization with affine `1 x d` parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let v = affine_rows(&xhat, self.value(gamma), self.value(beta));
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-column normalization with batch statistics (training mode).
    ///
    /// Returns the node together with the batch means and population variances
    /// so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> (NodeId, Vec<T>, Vec<T>) {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let nf = T::of_usize(n);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(NORM_EPS)).sqrt()).collect();
        let xhat = Matrix::from_fn(n, d, |r, c| (xv.get(r, c) - mean[c]) * inv_std[c]);
        let v = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (id, mean, var)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let src = self.value(x);
        assert!(start + width <= src.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(src.rows(), width, |r, c| src.get(r, start + c));
        self.push(v, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total = widths.iter().sum();
        let mut v = Matrix::zeros(rows, total);
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p);
            assert_eq!(src.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + w].copy_from_slice(src.row(r));
            }
            offset += w;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> NodeId {
        let src = self.value(x);
        assert!(start + count <= src.rows(), "slice_rows out of range");
        let cols = src.cols();
        let v = Matrix::from_vec(
            count,
            cols,
            src.as_slice()[start * cols..(start + count) * cols].to_vec(),
        )
        .expect("slice size");
        self.push(v, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let src = self.value(*p);
            assert_eq!(src.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(src.as_slice());
            rows += src.rows();
        }
        let v = Matrix::from_vec(rows, cols, data).expect("concat size");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Sliding windows: row `t` of the output is rows `t*stride .. t*stride+kernel`
    /// of `x` laid end to end. This turns a 1-D convolution into a matmul.
    pub fn im2col(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (len, ch) = src.shape();
        if len < kernel {
            return Err(Error::Shape(format!(
                "sequence of {len} steps is shorter than kernel {kernel}"
            )));
        }
        let out_len = (len - kernel) / stride + 1;
        let mut v = Matrix::zeros(out_len, kernel * ch);
        for t in 0..out_len {
            let start = t * stride * ch;
            v.row_mut(t)
                .copy_from_slice(&src.as_slice()[start..start + kernel * ch]);
        }
        Ok(self.push(v, Op::Im2Col { x, kernel, stride }, &[x]))
    }

    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> NodeId {
        let src = self.value(x);
        let cols = src.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::from_vec(index.len(), cols, data).expect("gather size");
        self.push(v, Op::GatherRows(x, index.to_vec()), &[x])
    }

    /// Copies `x` with the listed rows overwritten by the `1 x d` row `fill`.
    pub fn replace_rows(&mut self, x: NodeId, fill: NodeId, rows: &[usize]) -> NodeId {
        let mut v = self.value(x).clone();
        let f = self.value(fill).as_slice().to_vec();
        for &r in rows {
            v.row_mut(r).copy_from_slice(&f);
        }
        self.push(
            v,
            Op::ReplaceRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
            &[x, fill],
        )
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mean_rows();
        self.push(v, Op::MeanRows(x), &[x])
    }

    /// Summed cross-entropy `-Σ_t log softmax(logits_t)[labels_t]` as a `1 x 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Shape(format!("label {bad} outside {} classes", z.cols())));
        }
        let probs = softmax_rows(z);
        let mut loss = T::zero();
        for (t, &l) in labels.iter().enumerate() {
            let row = z.row(t);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `1 - CCC(pred, truth)` for an `n x 1` prediction column.
    pub fn ccc_loss(&mut self, pred: NodeId, truth: &[T]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.cols() != 1 || p.rows() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction shape {:?} does not match {} targets",
                p.shape(),
                truth.len()
            )));
        }
        let ccc = crate::metrics::ccc(p.as_slice(), truth)?;
        Ok(self.push(
            Matrix::filled(1, 1, T::one() - ccc),
            Op::CccLoss {
                pred,
                truth: truth.to_vec(),
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = self.value(parts[0]).clone();
        for p in &parts[1..] {
            v.add_assign(self.value(*p));
        }
        self.push(v, Op::Sum(parts.to_vec()), parts)
    }

    /// Gradients of the `1 x 1` node `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let mut acc = |id: NodeId, m: Matrix<T>| {
            if !self.wants(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                if self.wants(*r) {
                    acc(*r, g.sum_rows());
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::MulRow(x, r) => {
                let xv = self.value(*x);
                let rv = self.value(*r);
                if self.wants(*x) {
                    acc(*x, Matrix::from_fn(g.rows(), g.cols(), |i, c| g.get(i, c) * rv.get(0, c)));
                }
                if self.wants(*r) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for c in 0..g.cols() {
                            d.as_mut_slice()[c] += g.get(i, c) * xv.get(i, c);
                        }
                    }
                    acc(*r, d);
                }
            }
            Op::MulConst(x, mask) => {
                let mut d = g.clone();
                for (o, &m) in d.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *o *= m;
                }
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (o, &v) in d.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_grad(v);
                }
                acc(*x, d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (o, &v) in d.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let (n, d) = xhat.shape();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let gv = g.get(r, c);
                            dg.as_mut_slice()[c] += gv * xhat.get(r, c);
                            db.as_mut_slice()[c] += gv;
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.wants(*x) {
                    let df = T::of_usize(d);
                    let mut dx = Matrix::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<T> = (0..d).map(|c| g.get(r, c) * gam.get(0, c)).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            let v = inv_std[r] / df * (df * dxhat[c] - s1 - xhat.get(r, c) * s2);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let (n, d) = xhat.shape();
                let mut dg = Matrix::zeros(1, d);
                let mut db = Matrix::zeros(1, d);
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.get(r, c);
                        dg.as_mut_slice()[c] += gv * xhat.get(r, c);
                        db.as_mut_slice()[c] += gv;
                    }
                }
                if self.wants(*x) {
                    let nf = T::of_usize(n);
                    let mut dx = Matrix::zeros(n, d);
                    for c in 0..d {
                        let gc = gam.get(0, c);
                        // dxhat sums are gamma * db and gamma * dg.
                        let s1 = gc * db.get(0, c);
                        let s2 = gc * dg.get(0, c);
                        for r in 0..n {
                            let dxhat = g.get(r, c) * gc;
                            let v = inv_std[c] / nf * (nf * dxhat - s1 - xhat.get(r, c) * s2);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(*p, d);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.wants(*p) {
                        let d = Matrix::from_vec(
                            rows,
                            cols,
                            g.as_slice()[offset * cols..(offset + rows) * cols].to_vec(),
                        )
                        .expect("concat slice");
                        acc(*p, d);
                    }
                    offset += rows;
                }
            }
            Op::Im2Col { x, kernel, stride } => {
                let src = self.value(*x);
                let ch = src.cols();
                let mut d = Matrix::zeros(src.rows(), ch);
                for t in 0..g.rows() {
                    let start = t * stride * ch;
                    let dst = &mut d.as_mut_slice()[start..start + kernel * ch];
                    for (o, &v) in dst.iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::GatherRows(x, index) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (i, &r) in index.iter().enumerate() {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::ReplaceRows { x, fill, rows } => {
                let mut dx = g.clone();
                let mut df = Matrix::zeros(1, g.cols());
                for &r in rows {
                    for (o, &v) in df.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                    dx.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                }
                acc(*x, dx);
                acc(*fill, df);
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let inv = T::one() / T::of_usize(rows);
                let d = Matrix::from_fn(rows, g.cols(), |_, c| g.get(0, c) * inv);
                acc(*x, d);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut d = probs.clone();
                for (t, &l) in labels.iter().enumerate() {
                    let v = d.get(t, l);
                    d.set(t, l, v - T::one());
                }
                d.scale_in_place(scale);
                acc(*logits, d);
            }
            Op::CccLoss { pred, truth } => {
                let p = self.value(*pred).as_slice();
                let scale = g.get(0, 0);
                acc(*pred, ccc_loss_grad(p, truth).map(|v| v * scale));
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, g.clone());
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

fn normalize_rows<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let (n, d) = x.shape();
    let df = T::of_usize(d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + T::of(NORM_EPS)).sqrt();
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

fn affine_rows<T: Scalar>(xhat: &Matrix<T>, gamma: &Matrix<T>, beta: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(xhat.rows(), xhat.cols(), |r, c| {
        xhat.get(r, c) * gamma.get(0, c) + beta.get(0, c)
    })
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Gradient of `1 - CCC(p, y)` with respect to `p`, as an `n x 1` column.
fn ccc_loss_grad<T: Scalar>(p: &[T], y: &[T]) -> Matrix<T> {
    let n = T::of_usize(p.len());
    let mx = p.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let vx = p.iter().map(|&a| (a - mx) * (a - mx)).sum::<T>() / n;
    let vy = y.iter().map(|&b| (b - my) * (b - my)).sum::<T>() / n;
    let cov = p.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum::<T>() / n;
    let denom = vx + vy + (mx - my) * (mx - my);
    let two = T::of(2.0);
    Matrix::column_vector(
        p.iter()
            .zip(y)
            .map(|(&a, &b)| {
                let dcov = (b - my) / n;
                let dden = two * ((a - mx) + (mx - my)) / n;
                -(two * dcov * denom - two * cov * dden) / (denom * denom)
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x`, one entry at a time.
    fn numeric_grad(x: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Checks d(sum(w ⊙ build(x)))/dx against finite differences.
    fn check_unary(x: Matrix<f64>, build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId) {
        let eval = |x: &Matrix<f64>| {
            let mut tape = Tape::new();
            let xi = tape.param(x.clone());
            let y = build(&mut tape, xi);
            let w = sample(tape.value(y).rows(), tape.value(y).cols(), 99);
            tape.value(y)
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let y = build(&mut tape, xi);
        let w = sample(tape.value(y).rows(), tape.value(y).cols(), 99);
        let wi = tape.constant(w);
        let prod = tape.mul_const(y, tape.value(wi).clone());
        let ones = tape.constant(Matrix::filled(1, tape.value(prod).rows(), 1.0));
        let colsum = tape.matmul(ones, prod);
        let ones_c = tape.constant(Matrix::filled(tape.value(colsum).cols(), 1, 1.0));
        let total = tape.matmul(colsum, ones_c);
        let grads = tape.backward(total);
        let analytic = grads.get(xi).unwrap().clone();
        assert_close(&analytic, &numeric_grad(&x, &eval), 1e-6);
    }

    #[test]
    fn elementwise_and_structural_ops() {
        check_unary(sample(3, 4, 1), |t, x| t.gelu(x));
        check_unary(sample(3, 4, 2), |t, x| t.softmax_rows(x));
        check_unary(sample(3, 4, 3), |t, x| t.mean_rows(x));
        check_unary(sample(3, 4, 4), |t, x| t.slice_cols(x, 1, 2));
        check_unary(sample(4, 3, 5), |t, x| t.slice_rows(x, 1, 2));
        check_unary(sample(9, 2, 6), |t, x| t.im2col(x, 3, 2).unwrap());
        check_unary(sample(4, 3, 7), |t, x| t.gather_rows(x, &[2, 0, 2]));
        check_unary(sample(3, 3, 8), |t, x| t.matmul_t(x, x));
        check_unary(sample(3, 3, 11), |t, x| {
            let r = t.slice_rows(x, 1, 1);
            t.mul_row(x, r)
        });
        check_unary(sample(3, 3, 9), |t, x| {
            let a = t.slice_cols(x, 0, 1);
            let b = t.slice_cols(x, 1, 2);
            t.concat_cols(&[b, a])
        });
        check_unary(sample(3, 3, 10), |t, x| {
            let a = t.slice_rows(x, 0, 1);
            t.concat_rows(&[x, a])
        });
    }

    #[test]
    fn normalization_ops() {
        let gamma = sample(1, 5, 20);
        let beta = sample(1, 5, 21);
        let (g1, b1) = (gamma.clone(), beta.clone());
        check_unary(sample(4, 5, 22), move |t, x| {
            let g = t.constant(g1.clone());
            let b = t.constant(b1.clone());
            t.layer_norm(x, g, b)
        });
        check_unary(sample(4, 5, 23), move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            t.batch_norm(x, g, b).0
        });
    }

    #[test]
    fn fused_losses() {
        let labels = [2usize, 0, 1];
        check_unary(sample(3, 4, 30), move |t, x| t.softmax_cross_entropy(x, &labels).unwrap());
        let truth = [1.0, 2.5, 3.0, 6.0, 4.0];
        check_unary(sample(5, 1, 31), move |t, x| t.ccc_loss(x, &truth).unwrap());
    }

    #[test]
    fn replace_rows_routes_gradient_to_fill() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(3, 2, 1.0));
        let fill = tape.param(Matrix::filled(1, 2, 0.0));
        let y = tape.replace_rows(x, fill, &[0, 2]);
        let m = tape.mean_rows(y);
        let ones = tape.constant(Matrix::filled(2, 1, 1.0));
        let s = tape.matmul(m, ones);
        let grads = tape.backward(s);
        let third = 1.0 / 3.0;
        assert_eq!(grads.get(x).unwrap().as_slice(), &[0.0, 0.0, third, third, 0.0, 0.0]);
        assert_eq!(grads.get(fill).unwrap().as_slice(), &[2.0 * third, 2.0 * third]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::filled(1, 1, 2.0));
        let p = tape.param(Matrix::filled(1, 1, 3.0));
        let y = tape.matmul(c, p);
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().get(0, 0), 2.0);
    }
}
