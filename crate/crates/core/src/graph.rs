//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! whose inputs require gradients are recorded in execution order, so the
//! record is topologically sorted by construction and [`Graph::backward`]
//! is a single reverse sweep.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanPool { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    SmoothL1 { a: Var, b: Var, beta: T },
    Chamfer {
        pred: Var,
        target: Var,
        groups: usize,
        pred_nn: Vec<usize>,
        target_nn: Vec<usize>,
    },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives plus the values they produced.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;

fn view_strides(trans: bool, cols: usize) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; its `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Copy of `v` that is cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[T]>::to_vec);
        t.clear_grad();
        g
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => (1, s.iter().product()),
        }
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(shape: [usize; 2], data: Vec<T>) -> Tensor<T> {
        Tensor::new(&shape, data).expect("internal shape")
    }

    // ---- forward primitives ----

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            view_strides(ta, ac),
            self.data(b),
            view_strides(tb, bc),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.push(Self::mat([m, n], out), Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (r, c) = self.dims(a);
        if self.nodes[row.0].value.numel() != c {
            return Err(shape_err(name, self.shape(a), self.shape(row)));
        }
        let (x, w) = (self.data(a), self.data(row));
        let out = (0..r * c).map(|i| f(x[i], w[i % c])).collect();
        Tensor::new(self.shape(a), out)
    }

    /// Adds a `c`-vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of an `r x c` matrix by a `c`-vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, row), &[a, row]))
    }

    /// Scales row `i` of an `r x c` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.nodes[col.0].value.numel() != r {
            return Err(shape_err("mul_col", self.shape(a), self.shape(col)));
        }
        let (x, s) = (self.data(a), self.data(col));
        let out = (0..r * c).map(|i| x[i] * s[i / c]).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.data(a);
        let out = (0..r * c).map(|i| x[(i % r) * c + i / r]).collect();
        self.push(Self::mat([c, r], out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone();
        let t = t.reshaped(shape)?;
        Ok(self.push(Tensor::new(shape, t.into_data())?, Op::Reshape(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows: no inputs"))?;
        let (_, c) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Self::mat([rows, c], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols: no inputs"))?;
        let (r, _) = self.dims(first);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.dims(p);
                out.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(Self::mat([r, cols], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", self.shape(a), &[start, end]));
        }
        let x = self.data(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        Ok(self.push(Self::mat([r, w], out), Op::SliceCols(a, start), &[a]))
    }

    /// Index-select along rows; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", self.shape(a), &[bad]));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(Self::mat([idx.len(), c], out), Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = T::zero();
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - m).exp();
                s = s + *oj;
            }
            for oj in o.iter_mut() {
                *oj = *oj / s;
            }
        }
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Parameter-free layer normalization over each row.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.data(a);
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let t = Tensor::new(self.shape(a), xhat.clone()).expect("same shape");
        self.push(t, Op::LayerNorm { x: a, xhat, rstd }, &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), out).expect("same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(T::zero()));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Max over consecutive blocks of `group` rows: `(g*group) x c -> g x c`.
    /// Ties resolve to the first row.
    pub fn max_pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if group == 0 || r % group != 0 {
            return Err(shape_err("max_pool_rows", self.shape(a), &[group]));
        }
        let g = r / group;
        let x = self.data(a);
        let mut out = vec![T::zero(); g * c];
        let mut argmax = vec![0; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group;
                for row in gi * group + 1..(gi + 1) * group {
                    if x[row * c + j] > x[best * c + j] {
                        best = row;
                    }
                }
                out[gi * c + j] = x[best * c + j];
                argmax[gi * c + j] = best;
            }
        }
        Ok(self.push(Self::mat([g, c], out), Op::MaxPool { x: a, argmax }, &[a]))
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if group == 0 || r % group != 0 {
            return Err(shape_err("mean_pool_rows", self.shape(a), &[group]));
        }
        let g = r / group;
        let x = self.data(a);
        let inv = T::one() / T::from_usize_lossy(group);
        let mut out = vec![T::zero(); g * c];
        for row in 0..r {
            for j in 0..c {
                out[(row / group) * c + j] = out[(row / group) * c + j] + x[row * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(Self::mat([g, c], out), Op::MeanPool { x: a, group }, &[a]))
    }

    /// Column-wise max over all rows, `1 x c`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.dims(a);
        self.max_pool_rows(a, r)
    }

    /// Column-wise mean over all rows, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.dims(a);
        self.mean_pool_rows(a, r)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.nodes[a.0].value.numel());
        let s = self.data(a).iter().fold(T::zero(), |s, &v| s + v) / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean elementwise smooth-L1: `0.5 d^2 / beta` if `|d| < beta`, else `|d| - 0.5 beta`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(invalid("smooth_l1: beta must be positive"));
        }
        let half = T::from_f64_lossy(0.5);
        let d = self.zip(a, b, "smooth_l1", |x, y| x - y)?;
        let n = T::from_usize_lossy(d.len().max(1));
        let s = d.iter().fold(T::zero(), |s, &v| {
            let av = v.abs();
            s + if av < beta { half * v * v / beta } else { av - half * beta }
        });
        Ok(self.push(Tensor::scalar(s / n), Op::SmoothL1 { a, b, beta }, &[a, b]))
    }

    /// Mean over `groups` of the symmetric squared Chamfer distance between
    /// consecutive blocks of `pred` and `target` rows (both `* x 3`).
    pub fn chamfer_grouped(&mut self, pred: Var, target: Var, groups: usize) -> Result<Var> {
        let (pr, pc) = self.dims(pred);
        let (tr, tc) = self.dims(target);
        if pc != 3 || tc != 3 || groups == 0 || pr % groups != 0 || tr % groups != 0 || pr == 0 || tr == 0 {
            return Err(shape_err("chamfer", self.shape(pred), self.shape(target)));
        }
        let (sp, st) = (pr / groups, tr / groups);
        let (p, q) = (self.data(pred), self.data(target));
        let mut pred_nn = vec![0; pr];
        let mut target_nn = vec![0; tr];
        let mut total = T::zero();
        for g in 0..groups {
            let (p0, q0) = (g * sp, g * st);
            let mut fwd = T::zero();
            let mut bwd = T::zero();
            let mut best_q = vec![T::infinity(); st];
            for i in p0..p0 + sp {
                let mut best = T::infinity();
                for j in q0..q0 + st {
                    let d = sq_dist(&p[i * 3..i * 3 + 3], &q[j * 3..j * 3 + 3]);
                    if d < best {
                        best = d;
                        pred_nn[i] = j;
                    }
                    if d < best_q[j - q0] {
                        best_q[j - q0] = d;
                        target_nn[j] = i;
                    }
                }
                fwd = fwd + best;
            }
            for b in best_q {
                bwd = bwd + b;
            }
            total = total + fwd / T::from_usize_lossy(sp) + bwd / T::from_usize_lossy(st);
        }
        let loss = total / T::from_usize_lossy(groups);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer {
                pred,
                target,
                groups,
                pred_nn,
                target_nn,
            },
            &[pred, target],
        ))
    }

    pub fn chamfer(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.chamfer_grouped(pred, target, 1)
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(shape_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln() + m;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[labels[i]];
        }
        let loss = loss / T::from_usize_lossy(r);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ----

    /// Propagates d(loss) to every leaf that requires a gradient, then drops
    /// the operation record.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) {
                if let (true, Some(g)) = (node.requires_grad, g) {
                    node.value.set_grad(g)?;
                }
            } else {
                node.op = Op::Leaf;
                node.requires_grad = false;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let sa = view_strides(*ta, ac);
                let sb = view_strides(*tb, bc);
                let sg = (n as isize, 1);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    T::gemm(m, n, k, T::one(), g, sg, bd, (sb.1, sb.0), T::one(), ga, sa);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    T::gemm(k, m, n, T::one(), ad, (sa.1, sa.0), g, sg, T::one(), gb, sb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + gi * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + gi * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (_, c) = self.dims(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    for (idx, &gi) in g.iter().enumerate() {
                        gr[idx % c] = gr[idx % c] + gi;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (_, c) = self.dims(*a);
                let (x, w) = (self.data(*a), self.data(*row));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, &gi) in g.iter().enumerate() {
                        ga[idx] = ga[idx] + gi * w[idx % c];
                    }
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    for (idx, &gi) in g.iter().enumerate() {
                        gr[idx % c] = gr[idx % c] + gi * x[idx];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (_, c) = self.dims(*a);
                let (x, s) = (self.data(*a), self.data(*col));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, &gi) in g.iter().enumerate() {
                        ga[idx] = ga[idx] + gi * s[idx / c];
                    }
                }
                if let Some(gs) = slot(nodes, grads, *col) {
                    for (idx, &gi) in g.iter().enumerate() {
                        gs[idx / c] = gs[idx / c] + gi * x[idx];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, *s);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, T::one());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, grads, p) {
                        axpy(gp, &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let (_, pc) = self.dims(p);
                    if let Some(gp) = slot(nodes, grads, p) {
                        for i in 0..r {
                            axpy(&mut gp[i * pc..(i + 1) * pc], &g[i * cols + off..i * cols + off + pc], T::one());
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (_, c) = self.dims(*a);
                let (r, w) = (out.shape()[0], out.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        axpy(&mut ga[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], T::one());
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = self.dims(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (k, &row) in idx.iter().enumerate() {
                        axpy(&mut ga[row * c..(row + 1) * c], &g[k * c..(k + 1) * c], T::one());
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims(*a);
                let y = out.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let (r, c) = self.dims(*x);
                let n = T::from_usize_lossy(c);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        let (xh, gr) = (&xhat[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let mg = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                        let mgx = gr.iter().zip(xh).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + rstd[i] * (gr[j] - mg - xh[j] * mgx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o = *o + gi * gelu_grad(xi);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let (_, c) = self.dims(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, (&row, &gi)) in argmax.iter().zip(g).enumerate() {
                        let j = o % c;
                        gx[row * c + j] = gx[row * c + j] + gi;
                    }
                }
            }
            Op::MeanPool { x, group } => {
                let (_, c) = self.dims(*x);
                let inv = T::one() / T::from_usize_lossy(*group);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        let (row, j) = (idx / c, idx % c);
                        *o = *o + g[(row / group) * c + j] * inv;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(nodes[a.0].value.numel());
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0] / n);
                }
            }
            Op::SmoothL1 { a, b, beta } => {
                let (x, y) = (self.data(*a), self.data(*b));
                let n = T::from_usize_lossy(x.len().max(1));
                let d: Vec<T> = x
                    .iter()
                    .zip(y)
                    .map(|(&xi, &yi)| {
                        let d = xi - yi;
                        let dd = if d.abs() < *beta { d / *beta } else { d.signum() };
                        dd * g[0] / n
                    })
                    .collect();
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, &d, T::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, &d, -T::one());
                }
            }
            Op::Chamfer {
                pred,
                target,
                groups,
                pred_nn,
                target_nn,
            } => {
                let (p, q) = (self.data(*pred), self.data(*target));
                let sp = pred_nn.len() / groups;
                let st = target_nn.len() / groups;
                let two = T::from_f64_lossy(2.0);
                let gs = g[0] / T::from_usize_lossy(*groups);
                let wf = two * gs / T::from_usize_lossy(sp);
                let wb = two * gs / T::from_usize_lossy(st);
                let mut dp = vec![T::zero(); p.len()];
                let mut dq = vec![T::zero(); q.len()];
                for (i, &j) in pred_nn.iter().enumerate() {
                    for d in 0..3 {
                        let diff = p[i * 3 + d] - q[j * 3 + d];
                        dp[i * 3 + d] = dp[i * 3 + d] + wf * diff;
                        dq[j * 3 + d] = dq[j * 3 + d] - wf * diff;
                    }
                }
                for (j, &i) in target_nn.iter().enumerate() {
                    for d in 0..3 {
                        let diff = p[i * 3 + d] - q[j * 3 + d];
                        dp[i * 3 + d] = dp[i * 3 + d] + wb * diff;
                        dq[j * 3 + d] = dq[j * 3 + d] - wb * diff;
                    }
                }
                if let Some(gp) = slot(nodes, grads, *pred) {
                    axpy(gp, &dp, T::one());
                }
                if let Some(gq) = slot(nodes, grads, *target) {
                    axpy(gq, &dq, T::one());
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = self.dims(*logits);
                let scale = g[0] / T::from_usize_lossy(r);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for i in 0..r {
                        for j in 0..c {
                            let t = if labels[i] == j { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + (probs[i * c + j] - t) * scale;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` is not
/// differentiable.
fn slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + s * v;
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let (k, c, half) = (T::from_f64_lossy(GELU_K), T::from_f64_lossy(GELU_C), T::from_f64_lossy(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, c, half) = (T::from_f64_lossy(GELU_K), T::from_f64_lossy(GELU_C), T::from_f64_lossy(0.5));
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = seeded(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` w.r.t. every input. The scalar
    /// reduced is `sum(f(x) * w)` for a fixed random `w`.
    fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Tensor<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs
                .iter()
                .map(|t| g.leaf(if grad { t.clone().with_grad() } else { t.clone() }))
                .collect();
            let y = f(&mut g, &vars);
            let w = g.constant(rand_tensor(g.shape(y), 99));
            let yw = g.mul(y, w).unwrap();
            let l = g.sum(yw);
            let val = g.value(l).item();
            if !grad {
                return (val, vec![]);
            }
            g.backward(l).unwrap();
            (val, vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect())
        };
        let (_, analytic) = eval(inputs, true);
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let a = analytic[k][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "input {k} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(3));
        let a = g.constant(rand_tensor(&[3, 3], 1));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[4, 32], 2));
        let x = g.scale(x, 3.0);
        let y = g.layer_norm(x);
        let t = g.value(y);
        for r in 0..4 {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rand_tensor(&[3], 3).with_grad());
        let c = g.constant(rand_tensor(&[3], 4));
        let d = g.detach(x);
        let y = g.mul(x, c).unwrap();
        let y = g.mul(y, d).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn non_scalar_backward_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rand_tensor(&[3], 3).with_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn gradcheck_matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(if ta { &[4, 3] } else { &[3, 4] }, 10);
            let b = rand_tensor(if tb { &[5, 4] } else { &[4, 5] }, 11);
            check(&[a, b], |g, v| g.matmul_t(v[0], v[1], ta, tb).unwrap());
        }
    }

    #[test]
    fn gradcheck_elementwise() {
        let (a, b) = (rand_tensor(&[3, 4], 12), rand_tensor(&[3, 4], 13));
        check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check(&[a.clone(), b], |g, v| g.mul(v[0], v[1]).unwrap());
        check(&[a.clone()], |g, v| g.scale(v[0], -1.7));
        check(&[a.clone()], |g, v| g.gelu(v[0]));
        check(&[a.clone()], |g, v| g.relu(v[0]));
        check(&[a.clone()], |g, v| g.transpose(v[0]));
        check(&[a], |g, v| g.reshape(v[0], &[2, 6]).unwrap());
    }

    #[test]
    fn gradcheck_broadcasts() {
        let a = rand_tensor(&[3, 4], 14);
        check(&[a.clone(), rand_tensor(&[4], 15)], |g, v| g.add_row(v[0], v[1]).unwrap());
        check(&[a.clone(), rand_tensor(&[4], 16)], |g, v| g.mul_row(v[0], v[1]).unwrap());
        check(&[a, rand_tensor(&[3, 1], 17)], |g, v| g.mul_col(v[0], v[1]).unwrap());
    }

    #[test]
    fn gradcheck_structural() {
        let (a, b) = (rand_tensor(&[2, 4], 18), rand_tensor(&[3, 4], 19));
        check(&[a.clone(), b.clone()], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
        let c = rand_tensor(&[2, 3], 20);
        check(&[a.clone(), c], |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap());
        check(&[b.clone()], |g, v| g.slice_cols(v[0], 1, 3).unwrap());
        check(&[b], |g, v| g.gather_rows(v[0], &[2, 0, 2]).unwrap());
    }

    #[test]
    fn gradcheck_normalizers() {
        let a = rand_tensor(&[3, 5], 21);
        check(&[a.clone()], |g, v| g.softmax(v[0]));
        check(&[a], |g, v| g.layer_norm(v[0]));
    }

    #[test]
    fn gradcheck_reductions() {
        let a = rand_tensor(&[6, 4], 22);
        check(&[a.clone()], |g, v| g.max_pool_rows(v[0], 3).unwrap());
        check(&[a.clone()], |g, v| g.mean_pool_rows(v[0], 2).unwrap());
        check(&[a.clone()], |g, v| g.max_rows(v[0]).unwrap());
        check(&[a.clone()], |g, v| g.mean_rows(v[0]).unwrap());
        check(&[a.clone()], |g, v| g.sum(v[0]));
        check(&[a], |g, v| g.mean(v[0]));
    }

    #[test]
    fn gradcheck_losses() {
        let (a, b) = (rand_tensor(&[3, 4], 23), rand_tensor(&[3, 4], 24));
        let b = Tensor::from_fn(&[3, 4], |i| b.data()[i] * 2.0);
        check(&[a.clone(), b], |g, v| g.smooth_l1(v[0], v[1], 1.0).unwrap());
        let (p, q) = (rand_tensor(&[8, 3], 25), rand_tensor(&[6, 3], 26));
        check(&[p.clone(), q.clone()], |g, v| g.chamfer_grouped(v[0], v[1], 2).unwrap());
        check(&[p, q], |g, v| g.chamfer(v[0], v[1]).unwrap());
        check(&[a], |g, v| g.cross_entropy(v[0], &[1, 3, 0]).unwrap());
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.5));
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.constant(Tensor::scalar(2.0));
        let quad = g.smooth_l1(x, z, 1.0).unwrap();
        let lin = g.smooth_l1(y, z, 1.0).unwrap();
        let same = g.smooth_l1(x, x, 1.0).unwrap();
        assert_eq!(g.value(quad).item(), 0.125);
        assert_eq!(g.value(lin).item(), 1.5);
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn backward_clears_record() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rand_tensor(&[3], 5).with_grad());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(!g.requires_grad(l));
        assert!(g.grad(x).is_some());
    }
}
