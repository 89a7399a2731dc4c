//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended to a [`Tape`] as operations run, so insertion order is
//! already a topological order. [`Tape::backward`] walks it once in reverse.
//!
//! Elementwise binary operations broadcast: a dimension of size 1 on either
//! side stretches to match the other operand. The gradient of a broadcast
//! operand is summed back to its own shape.

use super::matrix::{Matrix, Shape};
use super::DiffError;
use crate::scalar::{Scalar, EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    /// `ln(max(x, EPS))`
    Log(Var),
    Abs(Var),
    Powf(Var, T),
    Sqrt(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    /// Per-row sum, `r x c -> r x 1`.
    SumCols(Var),
    /// Per-column sum, `r x c -> 1 x c`.
    SumRows(Var),
    /// Per-row maximum, `r x c -> r x 1`; first index wins ties.
    MaxCols(Var, Vec<usize>),
    Column(Var, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Powf(..) => "powf",
            Op::Sqrt(_) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::SumRows(_) => "sum_rows",
            Op::MaxCols(..) => "max_cols",
            Op::Column(..) => "column",
        }
    }
}

struct Node<T> {
    value: Matrix<T>,
    grad: Matrix<T>,
    op: Op<T>,
}

/// Records a computation graph. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backpropagated: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape, DiffError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            left: a,
            right: b,
        }),
    }
}

#[inline]
fn bidx(shape: Shape, i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Matrix::zeros(r, c),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input node. Parameters and constants are both leaves; a
    /// constant is simply a leaf whose gradient nobody reads.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: T) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Parent handles of a node, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Powf(a, _)
            | Op::Sqrt(a)
            | Op::Clamp(a, ..)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::SumRows(a)
            | Op::MaxCols(a, _)
            | Op::Column(a, _) => vec![*a],
        }
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = broadcast_shape(name, sa, sb)?;
        let va = self.value(a).as_slice();
        let vb = self.value(b).as_slice();
        let mut data = Vec::with_capacity(out.0 * out.1);
        for i in 0..out.0 {
            for j in 0..out.1 {
                let x = va[bidx(sa, i, j)];
                let y = vb[bidx(sb, i, j)];
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let value = Matrix::from_vec(out.0, out.1, data);
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// Elementwise quotient. Callers guard the denominator.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.1 != sb.0 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// `a + c` for a plain scalar `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Offset(a))
    }

    /// `c - a` for a plain scalar `c`.
    pub fn rsub(&mut self, c: T, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.offset(neg, c)
    }

    /// `max(a, 0)`; the subgradient at the kink is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log with the argument floored at `EPS`. Below the floor the
    /// gradient is zero.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = T::lit(EPS);
        let value = self.value(a).map(|x| x.max(eps).ln());
        self.push(value, Op::Log(a))
    }

    /// `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::abs);
        self.push(value, Op::Abs(a))
    }

    /// `a^p` for non-negative inputs (or integral `p`). Where `a == 0` and
    /// `p < 1` the derivative is taken as 0.
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    /// Square root of a non-negative input; derivative at 0 taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row_slice(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut total = T::zero();
            for &x in row {
                let e = (x - m).exp();
                total = total + e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / total;
            }
        }
        let value = Matrix::from_vec(r, c, data);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / T::from_usize_lossy(m.len()));
        self.push(value, Op::Mean(a))
    }

    /// Sums each row: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.row_slice(i).iter().copied().sum());
        self.push(value, Op::SumCols(a))
    }

    /// Sums each column: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_fn(1, m.cols(), |_, j| (0..m.rows()).map(|i| m.get(i, j)).sum());
        self.push(value, Op::SumRows(a))
    }

    /// Row maximum, `r x c -> r x 1`. The gradient goes to the first maximal
    /// entry of each row.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut arg = Vec::with_capacity(m.rows());
        let mut data = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = m.row_slice(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let value = Matrix::from_vec(m.rows(), 1, data);
        self.push(value, Op::MaxCols(a, arg))
    }

    /// Extracts column `j` as an `r x 1` node.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, DiffError> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(DiffError::ShapeMismatch {
                op: "column",
                left: m.shape(),
                right: (1, j + 1),
            });
        }
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.get(i, j));
        Ok(self.push(value, Op::Column(a, j)))
    }

    /// Propagates `d loss / d node` into every node's gradient.
    ///
    /// A tape supports exactly one backward pass; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.backpropagated {
            return Err(DiffError::AlreadyBackpropagated);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        self.backpropagated = true;
        self.nodes[loss.0].grad = Matrix::scalar(T::one());
        for idx in (0..=loss.0).rev() {
            // Taking the op out avoids aliasing the node being read.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            if !matches!(op, Op::Leaf) {
                self.propagate(idx, &op);
            }
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    pub fn is_backpropagated(&self) -> bool {
        self.backpropagated
    }

    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut Matrix<T>)) {
        let mut grad = std::mem::replace(&mut self.nodes[target.0].grad, Matrix::zeros(0, 0));
        f(&mut grad);
        self.nodes[target.0].grad = grad;
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>) {
        let g = self.nodes[idx].grad.clone();
        if g.as_slice().iter().all(|&v| v == T::zero()) {
            return;
        }
        let out = self.nodes[idx].value.clone();
        let zero = T::zero();
        let one = T::one();
        match *op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (r, c) = out.shape();
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                self.accumulate(a, |ga| {
                    let ga = ga.as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g.get(i, j);
                            let y = vb.as_slice()[bidx(sb, i, j)];
                            let d = match kind {
                                Binary::Add | Binary::Sub => gij,
                                Binary::Mul => gij * y,
                                Binary::Div => gij / y,
                            };
                            ga[bidx(sa, i, j)] = ga[bidx(sa, i, j)] + d;
                        }
                    }
                });
                self.accumulate(b, |gb| {
                    let gb = gb.as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g.get(i, j);
                            let x = va.as_slice()[bidx(sa, i, j)];
                            let y = vb.as_slice()[bidx(sb, i, j)];
                            let d = match kind {
                                Binary::Add => gij,
                                Binary::Sub => -gij,
                                Binary::Mul => gij * x,
                                Binary::Div => -gij * x / (y * y),
                            };
                            gb[bidx(sb, i, j)] = gb[bidx(sb, i, j)] + d;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(b).transpose());
                let db = self.value(a).transpose().matmul(&g);
                self.accumulate(a, |ga| ga.add_assign(&da));
                self.accumulate(b, |gb| gb.add_assign(&db));
            }
            Op::Transpose(a) => {
                let d = g.transpose();
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Scale(a, k) => self.accumulate(a, |ga| ga.add_assign(&g.map(|v| v * k))),
            Op::Offset(a) => self.accumulate(a, |ga| ga.add_assign(&g)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > zero { gv } else { zero });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&out, |gv, y| gv * y * (one - y));
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&out, |gv, y| gv * (one - y * y));
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Exp(a) => {
                let d = g.zip_map(&out, |gv, y| gv * y);
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Log(a) => {
                let eps = T::lit(EPS);
                let d = g.zip_map(self.value(a), |gv, x| if x > eps { gv / x } else { zero });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(a), |gv, x| {
                    if x > zero {
                        gv
                    } else if x < zero {
                        -gv
                    } else {
                        zero
                    }
                });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Powf(a, p) => {
                let d = g.zip_map(self.value(a), |gv, x| {
                    if x == zero && p < one {
                        zero
                    } else {
                        gv * p * x.powf(p - one)
                    }
                });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                let d = g.zip_map(&out, |gv, y| if y > zero { gv * half / y } else { zero });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > lo && x < hi { gv } else { zero });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.shape();
                let d = Matrix::from_fn(r, c, |i, j| {
                    let dot: T = (0..c).map(|k| g.get(i, k) * out.get(i, k)).sum();
                    out.get(i, j) * (g.get(i, j) - dot)
                });
                self.accumulate(a, |ga| ga.add_assign(&d));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(a, |ga| ga.as_mut_slice().iter_mut().for_each(|v| *v = *v + gv));
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(self.value(a).len());
                let gv = g.item() / n;
                self.accumulate(a, |ga| ga.as_mut_slice().iter_mut().for_each(|v| *v = *v + gv));
            }
            Op::SumCols(a) => self.accumulate(a, |ga| {
                let (r, c) = ga.shape();
                for i in 0..r {
                    for j in 0..c {
                        ga[(i, j)] = ga[(i, j)] + g.get(i, 0);
                    }
                }
            }),
            Op::SumRows(a) => self.accumulate(a, |ga| {
                let (r, c) = ga.shape();
                for i in 0..r {
                    for j in 0..c {
                        ga[(i, j)] = ga[(i, j)] + g.get(0, j);
                    }
                }
            }),
            Op::MaxCols(a, ref arg) => self.accumulate(a, |ga| {
                for (i, &j) in arg.iter().enumerate() {
                    ga[(i, j)] = ga[(i, j)] + g.get(i, 0);
                }
            }),
            Op::Column(a, j) => self.accumulate(a, |ga| {
                for i in 0..ga.rows() {
                    ga[(i, j)] = ga[(i, j)] + g.get(i, 0);
                }
            }),
        }
    }
}
