//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order, which is also a
//! valid topological order, so the backward sweep is a single reverse scan.
//! Graphs are rebuilt per minibatch: bind parameters as leaves, run the
//! forward pass, call [`Tape::backward`] once, read the leaf gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    DivColBroadcast(Var, Var),
    SumAll(Var),
    Trace(Var),
    RowSum(Var),
    Mean(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    GradReverse(Var, f64),
    Transpose(Var),
    VStack(Var, Var),
    SliceRows(Var, usize),
    RowNorms(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Element-wise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Abs,
    Exp,
    Log,
    Relu,
}

/// Reduction kinds accepted by [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    SumAll,
    Trace,
    RowSum,
    Mean,
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
    reversal_fault: bool,
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

    /// Fault injection for mutation checks: when set, gradient reversal
    /// passes gradients through with the wrong sign.
    pub fn inject_reversal_sign_fault(&mut self, on: bool) {
        self.reversal_fault = on;
    }

    /// A differentiable leaf (a trainable parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, fixed matrices).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// `None` before [`Tape::backward`] or for nodes that do not depend on
    /// any parameter. Parameters unreachable from the loss get zeros.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so that `backward` may be called again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let value = Matrix::vstack(self.value(top), self.value(bottom))?;
        Ok(self.binary(top, bottom, value, Op::VStack(top, bottom)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", (rows, cols), (start, end)));
        }
        let value = self.value(a).slice_rows(start, end);
        Ok(self.unary(a, value, Op::SliceRows(a, start)))
    }

    // ---- element-wise ----

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::param(
                "inputs",
                format!("{kind:?} takes {arity} operand(s), got {}", inputs.len()),
            ));
        }
        match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Neg => Ok(self.neg(inputs[0])),
            Elementwise::Abs => Ok(self.abs(inputs[0])),
            Elementwise::Exp => Ok(self.exp(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.binary(a, b, value, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.unary(a, value, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.unary(a, value, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    /// NaN inputs propagate; non-positive ones are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.unary(a, value, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative entry {bad}"),
            });
        }
        let value = self.value(a).map(f64::sqrt);
        Ok(self.unary(a, value, Op::Sqrt(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x <= 0.0 { 0.0 } else { x });
        self.unary(a, value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.unary(a, value, Op::AddScalar(a))
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, value, Op::Clamp(a, lo, hi))
    }

    // ---- broadcasting ----

    /// `a[m×n] + bias[1×n]` added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb != (1, sa.1) {
            return Err(Error::shape("add_row_broadcast", sa, sb));
        }
        let b = self.value(bias).data().to_vec();
        let value = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) + b[j]);
        Ok(self.binary(a, bias, value, Op::AddRowBroadcast(a, bias)))
    }

    /// `a[m×n]` with row `i` multiplied by `col[i]`.
    pub fn mul_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::shape("mul_col_broadcast", sa, sc));
        }
        let c = self.value(col).data().to_vec();
        let value = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) * c[i]);
        Ok(self.binary(a, col, value, Op::MulColBroadcast(a, col)))
    }

    /// `a[m×n]` with row `i` divided by `col[i]`.
    pub fn div_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::shape("div_col_broadcast", sa, sc));
        }
        let c = self.value(col).data().to_vec();
        let value = Matrix::from_fn(sa.0, sa.1, |i, j| self.value(a).get(i, j) / c[i]);
        Ok(self.binary(a, col, value, Op::DivColBroadcast(a, col)))
    }

    // ---- reductions ----

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var> {
        match kind {
            Reduce::SumAll => Ok(self.sum_all(a)),
            Reduce::Trace => self.trace(a),
            Reduce::RowSum => Ok(self.row_sum(a)),
            Reduce::Mean => Ok(self.mean(a)),
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.0 != s.1 {
            return Err(Error::shape("trace", s, (s.1, s.0)));
        }
        let value = Matrix::scalar(self.value(a).trace());
        Ok(self.unary(a, value, Op::Trace(a)))
    }

    /// Per-row sums as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.unary(a, value, Op::RowSum(a))
    }

    /// Mean over all entries. The mean of an empty matrix is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.data().len();
        let value = Matrix::scalar(if n == 0 { 0.0 } else { m.sum() / n as f64 });
        self.unary(a, value, Op::Mean(a))
    }

    /// Euclidean norm of each row as an `m×1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_fn(m.rows(), 1, |i, _| {
            m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
        });
        self.unary(a, value, Op::RowNorms(a))
    }

    // ---- softmax family ----

    pub fn softmax_rows(&mut self, z: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let value = softmax_rows(self.value(z), temperature);
        Ok(self.unary(z, value, Op::SoftmaxRows(z, temperature)))
    }

    pub fn log_softmax_rows(&mut self, z: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let value = log_softmax_rows(self.value(z), temperature);
        Ok(self.unary(z, value, Op::LogSoftmaxRows(z, temperature)))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: Var, scale: f64) -> Var {
        let value = self.value(a).clone();
        self.unary(a, value, Op::GradReverse(a, scale))
    }

    // ---- backward ----

    /// Reverse sweep from a `1×1` loss. Fills gradients of every node that
    /// depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::shape("backward", s, (1, 1)));
        }
        if self.backward_done {
            return Err(Error::State(
                "backward called twice without zero_grad".to_string(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Matrix::zeros(r, c));
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    acc(a, g.matmul_nt(val(b)).expect("matmul backward"));
                }
                if self.rg(b) {
                    acc(b, val(a).matmul_tn(g).expect("matmul backward"));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip_map(val(b), |gi, y| gi * y));
                acc(b, g.zip_map(val(a), |gi, x| gi * x));
            }
            Op::Div(a, b) => {
                acc(a, g.zip_map(val(b), |gi, y| gi / y));
                let (x, y) = (val(a), val(b));
                let gb = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    -g.get(r, c) * x.get(r, c) / (y.get(r, c) * y.get(r, c))
                });
                acc(b, gb);
            }
            Op::Neg(a) => acc(a, g.scale(-1.0)),
            Op::Abs(a) => acc(a, g.zip_map(val(a), |gi, x| gi * sign(x))),
            Op::Exp(a) => acc(a, g.zip_map(&node.value, |gi, y| gi * y)),
            Op::Log(a) => acc(a, g.zip_map(val(a), |gi, x| gi / x)),
            Op::Sqrt(a) => acc(
                a,
                g.zip_map(
                    &node.value,
                    |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 },
                ),
            ),
            Op::Relu(a) => acc(a, g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(a) => acc(a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
            Op::Scale(a, s) => acc(a, g.scale(s)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Clamp(a, lo, hi) => acc(
                a,
                g.zip_map(val(a), |gi, x| if x >= lo && x <= hi { gi } else { 0.0 }),
            ),
            Op::AddRowBroadcast(a, bias) => {
                acc(a, g.clone());
                let gb =
                    Matrix::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|r| g.get(r, j)).sum());
                acc(bias, gb);
            }
            Op::MulColBroadcast(a, col) => {
                let (x, c) = (val(a), val(col));
                acc(
                    a,
                    Matrix::from_fn(x.rows(), x.cols(), |r, j| g.get(r, j) * c.get(r, 0)),
                );
                let gc = Matrix::from_fn(x.rows(), 1, |r, _| {
                    g.row(r).iter().zip(x.row(r)).map(|(gi, xi)| gi * xi).sum()
                });
                acc(col, gc);
            }
            Op::DivColBroadcast(a, col) => {
                let (x, c) = (val(a), val(col));
                acc(
                    a,
                    Matrix::from_fn(x.rows(), x.cols(), |r, j| g.get(r, j) / c.get(r, 0)),
                );
                let gc = Matrix::from_fn(x.rows(), 1, |r, _| {
                    let cr = c.get(r, 0);
                    -g.row(r)
                        .iter()
                        .zip(x.row(r))
                        .map(|(gi, xi)| gi * xi)
                        .sum::<f64>()
                        / (cr * cr)
                });
                acc(col, gc);
            }
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::filled(r, c, g.item()));
            }
            Op::Trace(a) => {
                let n = val(a).rows();
                acc(a, Matrix::identity(n).scale(g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = val(a).shape();
                let n = (r * c).max(1) as f64;
                acc(a, Matrix::filled(r, c, g.item() / n));
            }
            Op::SoftmaxRows(a, t) => {
                // dz_ij = y_ij (g_ij - Σ_k g_ik y_ik) / T
                let y = &node.value;
                let gz = Matrix::from_fn(y.rows(), y.cols(), |r, j| {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum();
                    y.get(r, j) * (g.get(r, j) - dot) / t
                });
                acc(a, gz);
            }
            Op::LogSoftmaxRows(a, t) => {
                // dz_ij = (g_ij - softmax_ij Σ_k g_ik) / T
                let l = &node.value;
                let gz = Matrix::from_fn(l.rows(), l.cols(), |r, j| {
                    let gs: f64 = g.row(r).iter().sum();
                    (g.get(r, j) - l.get(r, j).exp() * gs) / t
                });
                acc(a, gz);
            }
            Op::GradReverse(a, s) => {
                let factor = if self.reversal_fault { s } else { -s };
                acc(a, g.scale(factor));
            }
            Op::Transpose(a) => acc(a, g.transpose()),
            Op::VStack(top, bottom) => {
                let split = val(top).rows();
                acc(top, g.slice_rows(0, split));
                acc(bottom, g.slice_rows(split, g.rows()));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut full = Matrix::zeros(r, c);
                full.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                acc(a, full);
            }
            Op::RowNorms(a) => {
                let x = val(a);
                let norms = &node.value;
                acc(
                    a,
                    Matrix::from_fn(x.rows(), x.cols(), |r, j| {
                        let n = norms.get(r, 0);
                        if n > 0.0 {
                            g.get(r, 0) * x.get(r, j) / n
                        } else {
                            0.0
                        }
                    }),
                );
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param(
            "temperature",
            format!("must be positive, got {t}"),
        ));
    }
    Ok(())
}

/// Row-wise softmax of `z / t` with max subtraction.
pub fn softmax_rows(z: &Matrix, t: f64) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - m) / t).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / s);
        }
    }
    out
}

/// Row-wise log-softmax of `z / t`.
pub fn log_softmax_rows(z: &Matrix, t: f64) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| ((v - m) / t).exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, (v - m) / t - lse);
        }
    }
    out
}
