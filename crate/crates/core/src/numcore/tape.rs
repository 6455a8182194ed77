//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! Every array is two-dimensional: a vector is a `1 x n` row, a scalar is
//! `1 x 1`, and a batch of vectors is `batch x n`. Binary elementwise ops
//! broadcast only their right operand, and only from a `1 x n` row or a
//! `1 x 1` scalar. Anything else (column scaling, per-row replication) goes
//! through `matmul` or `gather_rows`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Handle to an array recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
    Clamp(f64, f64),
    MaxConst(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Unary(Var, Unary),
    /// Cached elementwise derivative.
    Gelu(Var, Vec<f64>),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Cached normalized values and reciprocal std per row.
    LayerNorm(Var, Vec<f64>),
    /// Cached row norms of both operands; zero marks a degenerate row.
    CosineRows(Var, Var, Vec<(f64, f64)>),
    NormalizeRows(Var, Vec<f64>),
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Norm below which `cosine_rows` reports a degenerate row.
pub const COSINE_EPS: f64 = 1e-8;

/// The tape. Parameters are read from the borrowed store; the gradients
/// produced by [`Graph::backward`] are owned and can be applied after the
/// graph is dropped.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    trainable: Option<Vec<bool>>,
    degenerate: usize,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            trainable: None,
            degenerate: 0,
        }
    }

    /// Graph in which only the listed parameters receive gradients; every
    /// other parameter enters as a constant. Skips gradient work for the
    /// parts of a model an update leaves alone.
    pub fn with_trainable(params: &'p ParamStore, ids: &[ParamId]) -> Self {
        let mut mask = vec![false; params.len()];
        for id in ids {
            mask[id.0] = true;
        }
        let mut g = Self::new(params);
        g.trainable = Some(mask);
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` array.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), Shape::new(1, 1));
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Number of rows that hit the near-zero-norm branch of `cosine_rows`.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- leaves -------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, value, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(crate::invalid!(
                "leaf of shape [{rows}, {cols}] given {} values",
                value.len()
            ));
        }
        Ok(self.push(Shape::new(rows, cols), value, Op::Leaf, needs_grad))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Shape::new(rows, cols), vec![0.0; rows * cols], Op::Leaf, false)
    }

    pub fn full(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        self.push(Shape::new(rows, cols), vec![x; rows * cols], Op::Leaf, false)
    }

    /// Trainable parameter. Frozen parameters enter as constants, so no
    /// gradient is ever produced for them. Repeated loads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let fixed = p.frozen || self.trainable.as_ref().is_some_and(|m| !m[id.0]);
        let v = if fixed {
            self.push(Shape::new(p.rows, p.cols), p.values.clone(), Op::Leaf, false)
        } else {
            self.push(Shape::new(p.rows, p.cols), p.values.clone(), Op::Param, true)
        };
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Parameter value as a constant: gradients flow through it to other
    /// inputs but never into the parameter itself.
    pub fn param_const(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        self.push(Shape::new(p.rows, p.cols), p.values.clone(), Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape, n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; sa.rows * sb.cols];
        gemm(
            sa.rows,
            sa.cols,
            sb.cols,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Shape::new(sa.rows, sb.cols), out, Op::MatMul(a, b), ng))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.rows == 1 && sb.cols == sa.cols {
            Ok(Bcast::Row)
        } else if sb.rows == 1 && sb.cols == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Vec<f64>, Bcast)> {
        let kind = self.bcast(op, a, b)?;
        let sa = self.shape(a);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = match kind {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => {
                let mut out = Vec::with_capacity(av.len());
                for row in av.chunks_exact(sa.cols) {
                    out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        Ok((out, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a), out, Op::Add(a, b, k), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a), out, Op::Sub(a, b, k), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, k) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a), out, Op::Mul(a, b, k), ng))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| scale * x + shift).collect();
        let ng = self.ng(a);
        self.push(self.shape(a), out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        self.affine(a, -1.0, c)
    }

    // ----- elementwise nonlinearities ------------------------------------

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| unary_fwd(u, x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a), out, Op::Unary(a, u), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// Exact GELU, `x * Phi(x)`. The derivative is kept for the backward
    /// pass.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(x.len());
        let mut dydx = Vec::with_capacity(x.len());
        for &x in x {
            let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
            out.push(x * cdf);
            dydx.push(cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x));
        }
        let ng = self.ng(a);
        if !ng {
            dydx = Vec::new();
        }
        self.push(self.shape(a), out, Op::Gelu(a, dydx), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Hard clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    /// `max(a, c)` elementwise; zero gradient where the floor is active.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::MaxConst(c))
    }

    /// Gated GELU: splits the last axis into halves `[a; b]`, returns
    /// `a * gelu(b)`.
    pub fn geglu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.cols % 2 != 0 {
            return Err(crate::invalid!("geglu needs an even last dimension, got {s}"));
        }
        let half = s.cols / 2;
        let a = self.slice_cols(x, 0, half)?;
        let b = self.slice_cols(x, half, half)?;
        let gb = self.gelu(b);
        self.mul(a, gb)
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(Shape::new(1, 1), vec![s], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum over columns, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .chunks_exact(s.cols.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let ng = self.ng(a);
        self.push(Shape::new(s.rows, 1), out, Op::SumCols(a), ng)
    }

    // ----- structure ----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| crate::invalid!("concat_cols of nothing"))?;
        let rows = self.shape(first).rows;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: sp,
                });
            }
            cols += sp.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).cols;
                out.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Shape::new(rows, cols), out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.cols || len == 0 {
            return Err(crate::invalid!("slice_cols {start}..{} out of {s}", start + len));
        }
        let mut out = Vec::with_capacity(s.rows * len);
        for r in self.nodes[a.0].value.chunks_exact(s.cols) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Shape::new(s.rows, len), out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| crate::invalid!("concat_rows of nothing"))?;
        let cols = self.shape(first).cols;
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: sp,
                });
            }
            rows += sp.rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Shape::new(rows, cols), out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.rows || len == 0 {
            return Err(crate::invalid!("slice_rows {start}..{} out of {s}", start + len));
        }
        let out = self.nodes[a.0].value[start * s.cols..(start + len) * s.cols].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Shape::new(len, s.cols), out, Op::SliceRows(a, start), ng))
    }

    /// Row `i` of the result is row `idx[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.rows) {
            return Err(crate::invalid!("gather_rows index {bad} out of {s}"));
        }
        if idx.is_empty() {
            return Err(crate::invalid!("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * s.cols);
        let v = &self.nodes[a.0].value;
        for &i in idx {
            out.extend_from_slice(&v[i * s.cols..(i + 1) * s.cols]);
        }
        let ng = self.ng(a);
        Ok(self.push(Shape::new(idx.len(), s.cols), out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// `[m, 1] -> [m, n]` by multiplying with a row of ones.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let ones = self.full(1, n, 1.0);
        self.matmul(a, ones)
    }

    // ----- fused normalizations -------------------------------------------

    /// Per-row layer normalization without affine, `eps` inside the sqrt.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a);
        if s.cols < 2 {
            return Err(crate::invalid!("layernorm needs at least 2 features, got {s}"));
        }
        let n = s.cols as f64;
        let mut out = Vec::with_capacity(s.len());
        let mut rstd = Vec::with_capacity(s.rows);
        for row in self.nodes[a.0].value.chunks_exact(s.cols) {
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd.push(r);
            out.extend(row.iter().map(|x| (x - mu) * r));
        }
        let ng = self.ng(a);
        Ok(self.push(s, out, Op::LayerNorm(a, rstd), ng))
    }

    /// Per-row cosine similarity, `[m, n] x [m, n] -> [m, 1]`. A row where
    /// either norm is below [`COSINE_EPS`] yields 0 with zero gradient and is
    /// counted in [`Graph::degenerate_cosines`].
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Vec::with_capacity(sa.rows);
        let mut norms = Vec::with_capacity(sa.rows);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut degenerate = 0;
        for (ra, rb) in av.chunks_exact(sa.cols).zip(bv.chunks_exact(sa.cols)) {
            let na = libm::sqrt(ra.iter().map(|x| x * x).sum());
            let nb = libm::sqrt(rb.iter().map(|x| x * x).sum());
            if na < COSINE_EPS || nb < COSINE_EPS {
                degenerate += 1;
                out.push(0.0);
                norms.push((0.0, 0.0));
            } else {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push((dot / (na * nb)).clamp(-1.0, 1.0));
                norms.push((na, nb));
            }
        }
        self.degenerate += degenerate;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Shape::new(sa.rows, 1), out, Op::CosineRows(a, b, norms), ng))
    }

    /// Each row scaled to unit L2 norm (rows with norm below 1e-12 pass
    /// through unscaled).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut out = Vec::with_capacity(s.len());
        let mut norms = Vec::with_capacity(s.rows);
        for row in self.nodes[a.0].value.chunks_exact(s.cols) {
            let n = libm::sqrt(row.iter().map(|x| x * x).sum());
            let n = if n < 1e-12 { 1.0 } else { n };
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let ng = self.ng(a);
        self.push(s, out, Op::NormalizeRows(a, norms), ng)
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of the `1 x 1` array `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::new(1, 1) {
            return Err(crate::invalid!("backward needs a scalar loss, got {}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params = vec![None; self.params.len()];
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if matches!(self.nodes[v.0].op, Op::Param) {
                    params[pid] = grads.get(v.0).cloned().flatten();
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let shape = node.shape;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.ng(*a) {
                    // dA = dY * B^T
                    let ga = acc(grads, *a, sa.len());
                    gemm_acc(sa.rows, sb.cols, sa.cols, gy, false, &self.nodes[b.0].value, true, ga);
                }
                if self.ng(*b) {
                    // dB = A^T * dY
                    let gb = acc(grads, *b, sb.len());
                    gemm_acc(sa.cols, sa.rows, sb.cols, &self.nodes[a.0].value, true, gy, false, gb);
                }
            }
            Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    accum(grads, *a, gy.iter().copied());
                }
                if self.ng(*b) {
                    let sb = self.shape(*b);
                    if *k == Bcast::Same {
                        accum(grads, *b, gy.iter().map(|d| sign * d));
                        return;
                    }
                    let gb = acc(grads, *b, sb.len());
                    reduce_bcast(*k, shape, gy, |j, d| gb[j] += sign * d);
                }
            }
            Op::Mul(a, b, k) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.ng(*a) {
                    match k {
                        Bcast::Same => accum(grads, *a, gy.iter().zip(bv).map(|(d, y)| d * y)),
                        _ => {
                            let ga = acc(grads, *a, shape.len());
                            for (i, g) in ga.iter_mut().enumerate() {
                                *g += gy[i] * bv[bcast_index(*k, shape, i)];
                            }
                        }
                    }
                }
                if self.ng(*b) {
                    let sb = self.shape(*b);
                    if *k == Bcast::Same {
                        accum(grads, *b, gy.iter().zip(av).map(|(d, x)| d * x));
                        return;
                    }
                    let gb = acc(grads, *b, sb.len());
                    for (i, d) in gy.iter().enumerate() {
                        gb[bcast_index(*k, shape, i)] += d * av[i];
                    }
                }
            }
            Op::Affine(a, s) => accum(grads, *a, gy.iter().map(|d| s * d)),
            Op::Unary(a, u) => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                accum(grads, *a, (0..gy.len()).map(|i| gy[i] * unary_grad(*u, x[i], y[i])));
            }
            Op::Gelu(a, dydx) => accum(grads, *a, gy.iter().zip(dydx).map(|(d, s)| d * s)),
            Op::SumAll(a) => {
                let n = self.shape(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::SumCols(a) => {
                let sa = self.shape(*a);
                let ga = acc(grads, *a, sa.len());
                for (r, row) in ga.chunks_exact_mut(sa.cols).enumerate() {
                    row.iter_mut().for_each(|g| *g += gy[r]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).cols;
                    if self.ng(p) {
                        let gp = acc(grads, p, shape.rows * c);
                        for r in 0..shape.rows {
                            let src = &gy[r * shape.cols + off..r * shape.cols + off + c];
                            gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let sa = self.shape(*a);
                let ga = acc(grads, *a, sa.len());
                for r in 0..shape.rows {
                    let dst = &mut ga[r * sa.cols + start..r * sa.cols + start + shape.cols];
                    dst.iter_mut()
                        .zip(&gy[r * shape.cols..(r + 1) * shape.cols])
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).len();
                    if self.ng(p) {
                        let gp = acc(grads, p, n);
                        gp.iter_mut().zip(&gy[off..off + n]).for_each(|(g, d)| *g += d);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let sa = self.shape(*a);
                let ga = acc(grads, *a, sa.len());
                let base = start * sa.cols;
                ga[base..base + gy.len()]
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::GatherRows(a, idx) => {
                let sa = self.shape(*a);
                let ga = acc(grads, *a, sa.len());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * sa.cols..(src + 1) * sa.cols];
                    dst.iter_mut()
                        .zip(&gy[r * sa.cols..(r + 1) * sa.cols])
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::LayerNorm(a, rstd) => {
                let n = shape.cols as f64;
                let xhat = &node.value;
                let ga = acc(grads, *a, shape.len());
                for r in 0..shape.rows {
                    let span = r * shape.cols..(r + 1) * shape.cols;
                    let dy = &gy[span.clone()];
                    let xh = &xhat[span.clone()];
                    let mean_dy = dy.iter().sum::<f64>() / n;
                    let mean_dyx = dy.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
                    for (j, g) in ga[span].iter_mut().enumerate() {
                        *g += rstd[r] * (dy[j] - mean_dy - xh[j] * mean_dyx);
                    }
                }
            }
            Op::CosineRows(a, b, norms) => {
                let c = self.shape(*a).cols;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na == 0.0 {
                        continue;
                    }
                    let cos = node.value[r];
                    let ra = &av[r * c..(r + 1) * c];
                    let rb = &bv[r * c..(r + 1) * c];
                    if self.ng(*a) {
                        let ga = acc(grads, *a, shape.rows * c);
                        for j in 0..c {
                            ga[r * c + j] += gy[r] * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc(grads, *b, shape.rows * c);
                        for j in 0..c {
                            gb[r * c + j] += gy[r] * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = shape.cols;
                let y = &node.value;
                let ga = acc(grads, *a, shape.len());
                for r in 0..shape.rows {
                    let span = r * c..(r + 1) * c;
                    let yr = &y[span.clone()];
                    let dy = &gy[span.clone()];
                    let proj: f64 = yr.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, g) in ga[span].iter_mut().enumerate() {
                        *g += (dy[j] - yr[j] * proj) / norms[r];
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf or intermediate node, `None` when no path exists.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `delta` into the gradient of `v`, taking it over outright on the
/// first contribution.
fn accum(grads: &mut [Option<Vec<f64>>], v: Var, delta: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta.collect()),
    }
}

fn bcast_index(k: Bcast, shape: Shape, i: usize) -> usize {
    match k {
        Bcast::Same => i,
        Bcast::Row => i % shape.cols,
        Bcast::Scalar => 0,
    }
}

fn reduce_bcast(k: Bcast, shape: Shape, gy: &[f64], mut f: impl FnMut(usize, f64)) {
    for (i, &d) in gy.iter().enumerate() {
        f(bcast_index(k, shape, i), d);
    }
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn unary_fwd(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => libm::tanh(x),
        Unary::Exp => libm::exp(x),
        Unary::Ln => libm::log(x),
        Unary::Sqrt => libm::sqrt(x),
        Unary::Square => x * x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::MaxConst(c) => x.max(c),
    }
}

fn unary_grad(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Clamp(lo, hi) => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::MaxConst(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// `out = op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, out: &mut [f64]) {
    gemm_beta(m, k, n, a, at, b, bt, out, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, out: &mut [f64]) {
    gemm_beta(m, k, n, a, at, b, bt, out, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, out: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // Stored layouts: a is [m,k] or [k,m] when transposed, likewise b.
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stored layouts.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
