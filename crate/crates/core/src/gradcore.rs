//! Dense-matrix reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass (define-by-run). Each
//! operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse order once and returns the adjoint of every
//! node that was reachable from the root.
//!
//! Only scalar-with-matrix broadcasting is supported, which keeps every
//! backward rule a few lines long. Nodes built purely from constants are
//! marked as not requiring gradients and are skipped during the backward
//! sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::math;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "MatrixRepr"))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter()).finish()
    }
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl Matrix {
    /// Builds a matrix, checking the length and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::config(alloc::format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector.
    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self::from_raw(rows, 1, data)
    }

    /// Row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_raw(1, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix (the first entry otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            Operand::plain(self),
            Operand::plain(other),
            &mut out,
            0.0,
        );
        Ok(out)
    }
}

/// A matrix operand for [`gemm`], optionally read transposed.
#[derive(Clone, Copy)]
struct Operand<'a> {
    m: &'a Matrix,
    transposed: bool,
}

impl<'a> Operand<'a> {
    fn plain(m: &'a Matrix) -> Self {
        Self { m, transposed: false }
    }

    fn t(m: &'a Matrix) -> Self {
        Self { m, transposed: true }
    }

    fn rows(&self) -> usize {
        if self.transposed {
            self.m.cols
        } else {
            self.m.rows
        }
    }

    fn cols(&self) -> usize {
        if self.transposed {
            self.m.rows
        } else {
            self.m.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        let (r, c) = (self.m.cols as isize, 1isize);
        if self.transposed {
            (c, r)
        } else {
            (r, c)
        }
    }
}

/// `out = a * b + beta * out`.
fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut Matrix, beta: f64) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in out.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements laid out with
    // the given strides; shapes were asserted above and `out` is not aliased.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.m.data.as_ptr(),
            rsa,
            csa,
            b.m.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operations. Binary ones accept equal shapes or a 1x1 operand
/// on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Exp,
    Log,
    Relu,
    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    Max0,
    Abs,
    Neg,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    Scatter { src: Var, index: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: its adjoint is returned by [`Tape::backward`].
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Generic element-wise entry point; `args` must match the op's arity.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != op.arity() {
            return Err(Error::config(alloc::format!(
                "{op:?} takes {} operand(s), got {}",
                op.arity(),
                args.len()
            )));
        }
        if op.arity() == 2 {
            self.binary(op, args[0], args[1])
        } else {
            self.unary(op, args[0])
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa == sb || sb == (1, 1) {
            sa
        } else if sa == (1, 1) {
            sb
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: sa,
                rhs: sb,
            });
        };
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
            _ => unreachable!(),
        };
        let (va, vb) = (self.value(a), self.value(b));
        let n = out_shape.0 * out_shape.1;
        let data: Vec<f64> = if sa == sb {
            va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect()
        } else if sb == (1, 1) {
            let y = vb.data[0];
            va.data.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = va.data[0];
            vb.data.iter().map(|&y| f(x, y)).collect()
        };
        debug_assert_eq!(data.len(), n);
        let rg = self.rg(a) || self.rg(b);
        let value = Matrix::from_raw(out_shape.0, out_shape.1, data);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let va = self.value(a);
        if op == Elementwise::Log {
            if let Some(&bad) = va.data.iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(bad));
            }
        }
        let value = va.map(|x| match op {
            Elementwise::Tanh => math::tanh(x),
            Elementwise::Exp => math::exp(x),
            Elementwise::Log => math::ln(x),
            Elementwise::Relu | Elementwise::Max0 => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Elementwise::Abs => x.abs(),
            Elementwise::Neg => -x,
            _ => unreachable!(),
        });
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a).expect("tanh is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a).expect("relu is total")
    }

    pub fn max0(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Max0, a).expect("max0 is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Abs, a).expect("abs is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Neg, a).expect("neg is total")
    }

    /// `c * a` for a compile-time-known constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Matrix::scalar(c));
        self.add(a, k).expect("scalar broadcast")
    }

    /// Sum of all entries as a 1x1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all entries as a 1x1 value.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a column vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ones = self.constant(Matrix::filled(self.value(a).cols(), 1, 1.0));
        self.matmul(a, ones)
    }

    /// Softmax of a single row; masked (`true`) entries get probability 0.
    pub fn softmax_row(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        if self.shape(logits).0 != 1 {
            return Err(Error::Shape {
                op: "softmax_row",
                lhs: self.shape(logits),
                rhs: (1, mask.len()),
            });
        }
        self.softmax_rows(logits, mask)
    }

    /// Row-wise softmax with a row-major mask of the same shape; `true` marks
    /// an excluded entry. Uses max-subtraction.
    pub fn softmax_rows(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if mask.len() != rows * cols {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: (rows, cols),
                rhs: (mask.len(), 1),
            });
        }
        let z = self.value(logits);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let zr = &z.data[r * cols..(r + 1) * cols];
            let mr = &mask[r * cols..(r + 1) * cols];
            let max = zr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| !m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidCandidateSet);
            }
            let or = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for c in 0..cols {
                if !mr[c] {
                    let e = math::exp(zr[c] - max);
                    or[c] = e;
                    total += e;
                }
            }
            for x in or.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Matrix::from_raw(rows, cols, out), Op::SoftmaxRows(logits), rg))
    }

    /// Places the entries of `src` (in row-major order) at the flat positions
    /// `index` of a zero `rows x cols` matrix.
    pub fn scatter(&mut self, src: Var, rows: usize, cols: usize, index: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        if index.len() != s.len() || index.iter().any(|&i| i >= rows * cols) {
            return Err(Error::Shape {
                op: "scatter",
                lhs: s.shape(),
                rhs: (rows, cols),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (&i, &x) in index.iter().zip(&s.data) {
            out[i] = x;
        }
        let rg = self.rg(src);
        Ok(self.push(
            Matrix::from_raw(rows, cols, out),
            Op::Scatter { src, index },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape.0, shape.1));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        accumulate_gemm(&mut adj, *a, Operand::plain(&g), Operand::t(vb));
                    }
                    if self.rg(*b) {
                        accumulate_gemm(&mut adj, *b, Operand::t(va), Operand::plain(&g));
                    }
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (self.value(a), self.value(b));
                    match op {
                        Elementwise::Add => {
                            self.accumulate_broadcast(&mut adj, a, &g, |_, gi| gi);
                            self.accumulate_broadcast(&mut adj, b, &g, |_, gi| gi);
                        }
                        Elementwise::Sub => {
                            self.accumulate_broadcast(&mut adj, a, &g, |_, gi| gi);
                            self.accumulate_broadcast(&mut adj, b, &g, |_, gi| -gi);
                        }
                        Elementwise::Mul => {
                            let sb = vb.is_scalar() && !va.is_scalar();
                            let sa = va.is_scalar() && !vb.is_scalar();
                            let at = |m: &Matrix, j: usize, scalar: bool| {
                                if scalar {
                                    m.data[0]
                                } else {
                                    m.data[j]
                                }
                            };
                            self.accumulate_broadcast(&mut adj, a, &g, |j, gi| gi * at(vb, j, sb));
                            self.accumulate_broadcast(&mut adj, b, &g, |j, gi| gi * at(va, j, sa));
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Unary(op, a) => {
                    if self.rg(*a) {
                        let x = self.value(*a);
                        let y = &node.value;
                        let local: Vec<f64> = (0..g.len())
                            .map(|j| {
                                let d = match op {
                                    Elementwise::Tanh => 1.0 - y.data[j] * y.data[j],
                                    Elementwise::Exp => y.data[j],
                                    Elementwise::Log => 1.0 / x.data[j],
                                    Elementwise::Relu | Elementwise::Max0 => {
                                        if x.data[j] > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    Elementwise::Abs => {
                                        if x.data[j] > 0.0 {
                                            1.0
                                        } else if x.data[j] < 0.0 {
                                            -1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    Elementwise::Neg => -1.0,
                                    _ => unreachable!(),
                                };
                                d * g.data[j]
                            })
                            .collect();
                        add_to(&mut adj, *a, Matrix::from_raw(g.rows, g.cols, local));
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        add_to(&mut adj, *a, g.map(|x| c * x));
                    }
                }
                Op::Sum(a) => {
                    if self.rg(*a) {
                        let (r, c) = self.shape(*a);
                        add_to(&mut adj, *a, Matrix::filled(r, c, g.data[0]));
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.rg(*a) {
                        let p = &node.value;
                        let (rows, cols) = p.shape();
                        let mut dz = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let pr = &p.data[r * cols..(r + 1) * cols];
                            let gr = &g.data[r * cols..(r + 1) * cols];
                            let inner: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                            for c in 0..cols {
                                dz[r * cols + c] = pr[c] * (gr[c] - inner);
                            }
                        }
                        add_to(&mut adj, *a, Matrix::from_raw(rows, cols, dz));
                    }
                }
                Op::Scatter { src, index } => {
                    if self.rg(*src) {
                        let (r, c) = self.shape(*src);
                        let data = index.iter().map(|&i| g.data[i]).collect();
                        add_to(&mut adj, *src, Matrix::from_raw(r, c, data));
                    }
                }
            }
        }

        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.shape()).collect();
        let leaves = self.nodes[..=root.0]
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect::<Vec<_>>();
        for (i, is_leaf) in leaves.iter().enumerate() {
            if !is_leaf {
                adj[i] = None;
            }
        }
        Ok(Gradients { adj, shapes })
    }

    /// Adds `f(j, g_j)` into the adjoint of `v`, reducing over a broadcast
    /// scalar operand.
    fn accumulate_broadcast(
        &self,
        adj: &mut [Option<Matrix>],
        v: Var,
        g: &Matrix,
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.shape(v);
        if (r, c) == g.shape() {
            let data = g.data.iter().enumerate().map(|(j, &gi)| f(j, gi)).collect();
            add_to(adj, v, Matrix::from_raw(r, c, data));
        } else {
            let s = g.data.iter().enumerate().map(|(j, &gi)| f(j, gi)).sum();
            add_to(adj, v, Matrix::scalar(s));
        }
    }
}

fn add_to(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(adj: &mut [Option<Matrix>], v: Var, a: Operand<'_>, b: Operand<'_>) {
    match &mut adj[v.0] {
        Some(acc) => gemm(a, b, acc, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(a.rows(), b.cols());
            gemm(a, b, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

/// Adjoints of the trainable leaves reached from a root.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Matrix {
        match self.adj.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.0).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }

    /// Like [`Gradients::get`] but moves the matrix out.
    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adj.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes.get(v.0).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        matches!(self.adj.get(v.0), Some(Some(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn identity_matmul() {
        let m = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
        let mut t = Tape::new();
        let (x, y) = (t.param(a), t.param(b));
        assert!(t.matmul(x, y).is_err());
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn max0_branches() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(-0.3));
        let y = t.max0(x);
        assert_eq!(t.value(y).item(), 0.0);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 0.0);

        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(0.3));
        let y = t.max0(x);
        assert_eq!(t.value(y).item(), 0.3);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 1.0);

        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(0.0));
        let y = t.max0(x);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 0.0);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(vec![1.0, 0.0]));
        assert_eq!(t.log(x), Err(Error::Domain(0.0)));
        let y = t.param(Matrix::scalar(-2.0));
        assert_eq!(t.elementwise(Elementwise::Log, &[y]), Err(Error::Domain(-2.0)));
    }

    #[test]
    fn elementwise_arity_and_broadcast() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(vec![1.0, 2.0]));
        let y = t.param(Matrix::row(vec![1.0, 2.0, 3.0]));
        assert!(t.elementwise(Elementwise::Tanh, &[x, y]).is_err());
        assert!(matches!(t.add(x, y), Err(Error::Shape { .. })));
        let s = t.constant(Matrix::scalar(3.0));
        let z = t.mul(s, x).unwrap();
        assert_eq!(t.value(z).as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::row(vec![0.0, 0.0, 0.0]));
        let p = t.softmax_row(z, &[false; 3]).unwrap();
        for &x in t.value(p).as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let z = t.constant(Matrix::row(vec![1000.0, 0.0]));
        let p = t.softmax_row(z, &[false; 2]).unwrap();
        let v = t.value(p).as_slice();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let z = t.constant(Matrix::row(vec![1.0, 2.0]));
        let p = t.softmax_row(z, &[false, true]).unwrap();
        assert_eq!(t.value(p).as_slice(), &[1.0, 0.0]);

        assert_eq!(t.softmax_row(z, &[true, true]), Err(Error::InvalidCandidateSet));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(vec![1.0, 2.0]));
        assert_eq!(t.backward(x).unwrap_err(), Error::NonScalarRoot(1, 2));
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(vec![1.0, 2.0]));
        let c = t.constant(Matrix::scalar(5.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).as_slice(), &[0.0, 0.0]);
        assert!(!g.reached(x));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(vec![1.5, -2.0, 0.25]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).as_slice(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn scatter_roundtrip_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::column(vec![1.0, 2.0, 3.0]));
        let y = t.scatter(x, 2, 2, vec![0, 1, 3]).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, 2.0, 0.0, 3.0]);
        let w = t.constant(Matrix::new(2, 2, vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let prod = t.mul(y, w).unwrap();
        let s = t.sum(prod);
        assert_eq!(t.backward(s).unwrap().get(x).as_slice(), &[10.0, 20.0, 40.0]);
        assert!(t.scatter(x, 1, 2, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn tanh_matches_finite_differences() {
        let xs = [-1.7, -0.2, 0.0, 0.9, 1.95];
        for &x0 in &xs {
            let mut t = Tape::new();
            let x = t.param(Matrix::scalar(x0));
            let y = t.tanh(x);
            let g = t.backward(y).unwrap().get(x).item();
            let h = 1e-5;
            let fd = (math::tanh(x0 + h) - math::tanh(x0 - h)) / (2.0 * h);
            assert!(close(g, fd, 1e-5), "x={x0}: {g} vs {fd}");
        }
    }

    #[test]
    fn masked_softmax_gradient_is_zero_on_masked_entries() {
        let mut t = Tape::new();
        let z = t.param(Matrix::row(vec![0.3, -1.0, 2.0]));
        let p = t.softmax_row(z, &[false, true, false]).unwrap();
        let w = t.constant(Matrix::row(vec![1.0, 5.0, -2.0]));
        let prod = t.mul(p, w).unwrap();
        let s = t.sum(prod);
        let g = t.backward(s).unwrap().get(z);
        assert_eq!(g.get(0, 1), 0.0);
        assert!((g.get(0, 0) + g.get(0, 2)).abs() < 1e-15);
    }
}
