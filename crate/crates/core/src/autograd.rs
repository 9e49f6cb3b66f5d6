//! A small reverse-mode automatic differentiation tape over dense 2-D `f64`
//! matrices.
//!
//! Every tensor in the model is a row-major matrix: feature grids are
//! `(cells × channels)`, images are `(pixels × 3)`, descriptors are
//! `(parts × C)`. A [`Tape`] records operations as they are evaluated and
//! [`Tape::backward`] walks it in reverse to accumulate gradients for every
//! node that depends on a trainable leaf.

use std::cell::RefCell;
use std::sync::Arc;

use crate::spatial::SpatialMap;

/// Index value used by [`Tape::gather`] to emit a zero instead of reading.
pub const GATHER_ZERO: usize = usize::MAX;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let mut out = Mat::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnOp {
    Neg,
    Exp,
    /// `ln(max(x, floor))`; zero gradient below the floor.
    LogClamped(f64),
    Sqrt,
    Abs,
    Square,
    Sigmoid,
    Gelu,
    Cos,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
    /// Identity forward; multiplies the incoming gradient. Fault-injection hook.
    GradScale(f64),
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Binary(BinOp, usize, usize),
    Unary(UnOp, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, Vec<f64>),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    MaxCols(usize, Vec<usize>),
    MaxRows(usize, Vec<usize>),
    Gather(usize, Arc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Spatial(usize, Arc<SpatialMap>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_index(b: &Mat, rows: usize, cols: usize) -> impl Fn(usize, usize) -> usize {
    let (br, bc) = b.shape();
    assert!(
        (br == rows || br == 1) && (bc == cols || bc == 1),
        "cannot broadcast {br}x{bc} to {rows}x{cols}"
    );
    move |r, c| {
        let rr = if br == 1 { 0 } else { r };
        let cc = if bc == 1 { 0 } else { c };
        rr * bc + cc
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant leaf (stops gradients).
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with_value(v, |m| {
            assert_eq!(m.shape(), (1, 1), "not a scalar");
            m.data[0]
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(out, Op::MatMul(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_nt(&nodes[b.0].value)
        };
        self.push(out, Op::MatMulNT(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_tn(&nodes[b.0].value)
        };
        self.push(out, Op::MatMulTN(a.0, b.0), self.needs(&[a.0, b.0]))
    }

    /// Elementwise binary op; `b` may broadcast along rows, columns, or both.
    pub fn binary(&self, op: BinOp, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let idx = broadcast_index(bv, av.rows, av.cols);
            let mut out = Mat::zeros(av.rows, av.cols);
            for r in 0..av.rows {
                for c in 0..av.cols {
                    let x = av.data[r * av.cols + c];
                    let y = bv.data[idx(r, c)];
                    out.data[r * av.cols + c] = match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => x / y,
                    };
                }
            }
            out
        };
        self.push(out, Op::Binary(op, a.0, b.0), self.needs(&[a.0, b.0]))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Div, a, b)
    }

    pub fn unary(&self, op: UnOp, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let f = |x: f64| match op {
                UnOp::Neg => -x,
                UnOp::Exp => x.exp(),
                UnOp::LogClamped(floor) => x.max(floor).ln(),
                UnOp::Sqrt => x.sqrt(),
                UnOp::Abs => x.abs(),
                UnOp::Square => x * x,
                UnOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnOp::Gelu => gelu(x),
                UnOp::Cos => x.cos(),
                UnOp::Scale(s) => x * s,
                UnOp::AddScalar(s) => x + s,
                UnOp::ClampMin(lo) => x.max(lo),
                UnOp::GradScale(_) => x,
            };
            Mat::new(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect())
        };
        self.push(out, Op::Unary(op, a.0), self.needs(&[a.0]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(UnOp::Scale(s), a)
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |m| {
            let mut out = m.clone();
            for r in 0..m.rows {
                let row = out.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        });
        self.push(out, Op::SoftmaxRows(a.0), self.needs(&[a.0]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |m| {
            let mut out = m.clone();
            for r in 0..m.rows {
                let row = out.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        });
        self.push(out, Op::LogSoftmaxRows(a.0), self.needs(&[a.0]))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&self, a: Var) -> Var {
        let (out, sigmas) = self.with_value(a, |m| {
            let mut out = m.clone();
            let mut sigmas = Vec::with_capacity(m.rows);
            let n = m.cols as f64;
            for r in 0..m.rows {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sigma = (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) / sigma;
                }
                sigmas.push(sigma);
            }
            (out, sigmas)
        });
        self.push(out, Op::LayerNormRows(a.0, sigmas), self.needs(&[a.0]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.with_value(a, |m| m.data.iter().sum::<f64>());
        self.push(Mat::scalar(s), Op::SumAll(a.0), self.needs(&[a.0]))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_value(a, |m| m.data.len()) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over rows, producing `1 × cols`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = self.with_value(a, |m| {
            let mut out = Mat::zeros(1, m.cols);
            for r in 0..m.rows {
                for (o, v) in out.data.iter_mut().zip(m.row(r)) {
                    *o += v;
                }
            }
            out
        });
        self.push(out, Op::SumRows(a.0), self.needs(&[a.0]))
    }

    /// Sums over columns, producing `rows × 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.with_value(a, |m| {
            Mat::new(m.rows, 1, (0..m.rows).map(|r| m.row(r).iter().sum()).collect())
        });
        self.push(out, Op::SumCols(a.0), self.needs(&[a.0]))
    }

    /// Column-wise maximum over rows (`1 × cols`); ties go to the first row.
    pub fn max_cols(&self, a: Var) -> Var {
        let (out, arg) = self.with_value(a, |m| {
            let mut out = Mat::filled(1, m.cols, f64::NEG_INFINITY);
            let mut arg = vec![0usize; m.cols];
            for r in 0..m.rows {
                for c in 0..m.cols {
                    let v = m.data[r * m.cols + c];
                    if v > out.data[c] {
                        out.data[c] = v;
                        arg[c] = r;
                    }
                }
            }
            (out, arg)
        });
        self.push(out, Op::MaxCols(a.0, arg), self.needs(&[a.0]))
    }

    /// Row-wise maximum over columns (`rows × 1`); ties go to the first column.
    pub fn max_rows(&self, a: Var) -> Var {
        let (out, arg) = self.with_value(a, |m| {
            let mut out = Mat::filled(m.rows, 1, f64::NEG_INFINITY);
            let mut arg = vec![0usize; m.rows];
            for r in 0..m.rows {
                for (c, &v) in m.row(r).iter().enumerate() {
                    if v > out.data[r] {
                        out.data[r] = v;
                        arg[r] = c;
                    }
                }
            }
            (out, arg)
        });
        self.push(out, Op::MaxRows(a.0, arg), self.needs(&[a.0]))
    }

    /// Builds a `rows × cols` matrix whose flat element `i` is the flat
    /// element `index[i]` of `a` (or zero for [`GATHER_ZERO`]).
    pub fn gather(&self, a: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let out = self.with_value(a, |m| {
            Mat::new(
                rows,
                cols,
                index
                    .iter()
                    .map(|&i| if i == GATHER_ZERO { 0.0 } else { m.data[i] })
                    .collect(),
            )
        });
        self.push(out, Op::Gather(a.0, index), self.needs(&[a.0]))
    }

    /// Selects rows of `a` in the given order.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Var {
        let cols = self.shape(a).1;
        let index: Vec<usize> =
            rows.iter().flat_map(|&r| (0..cols).map(move |c| r * cols + c)).collect();
        self.gather(a, Arc::new(index), rows.len(), cols)
    }

    /// Selects columns of `a` in the given order.
    pub fn select_cols(&self, a: Var, cols: &[usize]) -> Var {
        let (rows, width) = self.shape(a);
        let index: Vec<usize> =
            (0..rows).flat_map(|r| cols.iter().map(move |&c| r * width + c)).collect();
        self.gather(a, Arc::new(index), rows, cols.len())
    }

    /// Places the rows of `a` at `positions` of an otherwise zero `total_rows` matrix.
    pub fn scatter_rows(&self, a: Var, positions: &[usize], total_rows: usize) -> Var {
        let cols = self.shape(a).1;
        let mut index = vec![GATHER_ZERO; total_rows * cols];
        for (src, &dst) in positions.iter().enumerate() {
            for c in 0..cols {
                index[dst * cols + c] = src * cols + c;
            }
        }
        self.gather(a, Arc::new(index), total_rows, cols)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let index: Vec<usize> =
            (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        self.gather(a, Arc::new(index), cols, rows)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.cols, cols, "concat_rows column mismatch");
                rows += v.rows;
                data.extend_from_slice(&v.data);
            }
            Mat::new(rows, cols, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        self.push(out, Op::ConcatRows(ids), needs)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut offset = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.data[r * cols + offset..r * cols + offset + v.cols].copy_from_slice(v.row(r));
                }
                offset += v.cols;
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        self.push(out, Op::ConcatCols(ids), needs)
    }

    /// Applies a fixed sparse spatial operator (see [`SpatialMap`]).
    pub fn spatial(&self, a: Var, map: Arc<SpatialMap>) -> Var {
        let out = self.with_value(a, |m| map.apply(m));
        self.push(out, Op::Spatial(a.0, map), self.needs(&[a.0]))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], id: usize, g: Mat) {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(&mut grads, &nodes, *a, g.matmul_nt(bv));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, &nodes, *b, av.matmul_tn(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(&mut grads, &nodes, *a, g.matmul(bv));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, &nodes, *b, g.matmul_tn(av));
                    }
                }
                Op::MatMulTN(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        acc(&mut grads, &nodes, *a, bv.matmul_nt(&g));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, &nodes, *b, av.matmul(&g));
                    }
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let idx = broadcast_index(bv, av.rows, av.cols);
                    let mut ga = if nodes[*a].needs_grad { Some(Mat::zeros(av.rows, av.cols)) } else { None };
                    let mut gb = if nodes[*b].needs_grad { Some(Mat::zeros(bv.rows, bv.cols)) } else { None };
                    for r in 0..av.rows {
                        for c in 0..av.cols {
                            let k = r * av.cols + c;
                            let gi = g.data[k];
                            let x = av.data[k];
                            let bi = idx(r, c);
                            let y = bv.data[bi];
                            let (da, db) = match op {
                                BinOp::Add => (gi, gi),
                                BinOp::Sub => (gi, -gi),
                                BinOp::Mul => (gi * y, gi * x),
                                BinOp::Div => (gi / y, -gi * x / (y * y)),
                            };
                            if let Some(ga) = ga.as_mut() {
                                ga.data[k] += da;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb.data[bi] += db;
                            }
                        }
                    }
                    if let Some(ga) = ga {
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Unary(op, a) => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let data = g
                        .data
                        .iter()
                        .zip(x.data.iter().zip(&y.data))
                        .map(|(&gi, (&xi, &yi))| match *op {
                            UnOp::Neg => -gi,
                            UnOp::Exp => gi * yi,
                            UnOp::LogClamped(floor) => {
                                if xi > floor {
                                    gi / xi
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Sqrt => {
                                if yi > 0.0 {
                                    gi / (2.0 * yi)
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Abs => gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 },
                            UnOp::Square => 2.0 * xi * gi,
                            UnOp::Sigmoid => gi * yi * (1.0 - yi),
                            UnOp::Gelu => gi * gelu_grad(xi),
                            UnOp::Cos => -gi * xi.sin(),
                            UnOp::Scale(s) => gi * s,
                            UnOp::AddScalar(_) => gi,
                            UnOp::ClampMin(lo) => {
                                if xi > lo {
                                    gi
                                } else {
                                    0.0
                                }
                            }
                            UnOp::GradScale(s) => gi * s,
                        })
                        .collect();
                    acc(&mut grads, &nodes, *a, Mat::new(x.rows, x.cols, data));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yi, gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = g.get(r, c) - y.get(r, c).exp() * gsum;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LayerNormRows(a, sigmas) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (o, (yi, gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (gi - gmean - yi * gy) / sigmas[r];
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut grads, &nodes, *a, Mat::filled(r, c, g.data[0]));
                }
                Op::SumRows(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(&g.data);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.data[i]);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MaxCols(a, arg) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Mat::zeros(r, c);
                    for (col, &row) in arg.iter().enumerate() {
                        ga.data[row * c + col] += g.data[col];
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Mat::zeros(r, c);
                    for (row, &col) in arg.iter().enumerate() {
                        ga.data[row * c + col] += g.data[row];
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Gather(a, index) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Mat::zeros(r, c);
                    for (gi, &src) in g.data.iter().zip(index.iter()) {
                        if src != GATHER_ZERO {
                            ga.data[src] += gi;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        let slice = g.data[offset..offset + r * c].to_vec();
                        offset += r * c;
                        acc(&mut grads, &nodes, p, Mat::new(r, c, slice));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        let mut gp = Mat::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, &nodes, p, gp);
                    }
                }
                Op::Spatial(a, map) => {
                    acc(&mut grads, &nodes, *a, map.apply_transpose(&g));
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            out.data[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::new(rows, cols, data)
    }

    fn check(build: impl Fn(&Tape, Var) -> Var, x: &Mat) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&tape, v);
        let analytic = tape.backward(out).get_or_zeros(v, x.rows, x.cols);
        let numeric = numeric_grad(
            |m| {
                let t = Tape::new();
                let v = t.param(m.clone());
                let o = build(&t, v);
                t.scalar_value(o)
            },
            x,
            1e-6,
        );
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = sample(3, 4, 1);
        let b = sample(4, 2, 2);
        let direct = a.matmul(&b);
        assert!(direct.data.iter().zip(&a.matmul_nt(&b.transpose()).data).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(direct.data.iter().zip(&a.transpose().matmul_tn(&b).data).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn gradients_of_primitive_ops() {
        let x = sample(3, 4, 7);
        let w = sample(4, 5, 8);
        check(|t, v| { let c = t.constant(w.clone()); let y = t.matmul(v, c); t.sum_all(t.unary(UnOp::Square, y)) }, &x);
        check(|t, v| { let c = t.constant(x.clone()); let y = t.matmul_nt(c, v); t.sum_all(t.unary(UnOp::Square, y)) }, &sample(5, 4, 9));
        check(|t, v| { let y = t.softmax_rows(v); t.sum_all(t.mul(y, t.constant(sample(3, 4, 3)))) }, &x);
        check(|t, v| { let y = t.log_softmax_rows(v); t.sum_all(t.mul(y, t.constant(sample(3, 4, 4)))) }, &x);
        check(|t, v| { let y = t.layer_norm_rows(v); t.sum_all(t.mul(y, t.constant(sample(3, 4, 5)))) }, &x);
        check(|t, v| { let y = t.unary(UnOp::Gelu, v); t.sum_all(t.unary(UnOp::Sigmoid, y)) }, &x);
        check(|t, v| { let b = t.constant(sample(1, 4, 6)); let y = t.div(v, t.unary(UnOp::AddScalar(3.0), b)); t.sum_all(t.unary(UnOp::Exp, y)) }, &x);
        check(|t, v| { let y = t.sum_cols(t.unary(UnOp::Square, v)); let z = t.unary(UnOp::Sqrt, y); t.sum_all(t.unary(UnOp::Cos, z)) }, &x);
        check(|t, v| { let y = t.max_cols(v); t.sum_all(t.mul(y, t.constant(sample(1, 4, 11)))) }, &x);
        check(|t, v| { let y = t.transpose(v); let z = t.select_rows(y, &[3, 0]); t.sum_all(t.unary(UnOp::Square, z)) }, &x);
        check(|t, v| { let a = t.select_cols(v, &[1, 2]); let b = t.concat_cols(&[a, v]); let c = t.concat_rows(&[b, b]); t.sum_all(t.unary(UnOp::Square, c)) }, &x);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let x = sample(1, 4, 3);
        let a = sample(3, 4, 5);
        check(|t, v| { let c = t.constant(a.clone()); let y = t.mul(c, v); t.sum_all(t.unary(UnOp::Square, y)) }, &x);
        let col = sample(3, 1, 6);
        check(|t, v| { let c = t.constant(a.clone()); let y = t.sub(c, v); t.sum_all(t.unary(UnOp::Square, y)) }, &col);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Mat::filled(2, 2, 1.0));
        let p = tape.param(Mat::filled(2, 2, 2.0));
        let y = tape.sum_all(tape.mul(c, p));
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn grad_scale_hook_corrupts_only_backward() {
        let tape = Tape::new();
        let p = tape.param(Mat::filled(1, 2, 3.0));
        let y = tape.unary(UnOp::GradScale(2.0), p);
        assert_eq!(tape.value(y).data, vec![3.0, 3.0]);
        let s = tape.sum_all(y);
        assert_eq!(tape.backward(s).get(p).unwrap().data, vec![2.0, 2.0]);
    }
}
