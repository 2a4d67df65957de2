//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order. Handles returned by
//! the tape ([`Tensor`]) are plain node ids, so a fresh tape is built for each
//! forward pass and dropped afterwards.
//!
//! ```
//! use crma_core::autodiff::Tape;
//! use crma_core::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Inputs to `log` are clamped below at this value.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    node_id: usize,
}

impl Tensor {
    pub fn node_id(self) -> usize {
        self.node_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Log,
    Exp,
    Relu,
    ScalarMul(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Abs(usize),
    Log(usize),
    Exp(usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softmax(usize),
    RowSum(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
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

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.node_id].value
    }

    /// Scalar value of a `[1×1]` node.
    pub fn item(&self, t: Tensor) -> f64 {
        self.value(t).data()[0]
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.value(t).shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.node_id].requires_grad
    }

    /// Accumulated gradient; all zeros for nodes that never received one.
    pub fn grad(&self, t: Tensor) -> Matrix {
        let node = &self.nodes[t.node_id];
        match &node.grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(node.value.rows(), node.value.cols()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let node_id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Tensor { node_id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a.node_id, b.node_id]);
        Ok(self.push(value, Op::MatMul(a.node_id, b.node_id), rg))
    }

    /// Element-wise binary op; `b` may be `[1×1]` and is then broadcast.
    fn binary(&mut self, name: &'static str, a: Tensor, b: Tensor) -> Result<(Matrix, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        let f: fn(f64, f64) -> f64 = match name {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            "mul" => |x, y| x * y,
            _ => |x, y| x / y,
        };
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else if vb.shape() == (1, 1) {
            let s = vb.data()[0];
            va.map(|x| f(x, s))
        } else {
            return Err(Error::Dimension {
                op: name,
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        };
        Ok((value, self.rg(&[a.node_id, b.node_id])))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (v, rg) = self.binary("add", a, b)?;
        Ok(self.push(v, Op::Add(a.node_id, b.node_id), rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (v, rg) = self.binary("sub", a, b)?;
        Ok(self.push(v, Op::Sub(a.node_id, b.node_id), rg))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (v, rg) = self.binary("mul", a, b)?;
        Ok(self.push(v, Op::Mul(a.node_id, b.node_id), rg))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (v, rg) = self.binary("div", a, b)?;
        Ok(self.push(v, Op::Div(a.node_id, b.node_id), rg))
    }

    /// Adds a `[1×c]` row to every row of an `[n×c]` tensor.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let mut value = va.clone();
        let r = vr.data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a.node_id, row.node_id]);
        Ok(self.push(value, Op::AddRow(a.node_id, row.node_id), rg))
    }

    fn unary(&mut self, a: Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let value = self.value(a).map(f);
        let rg = self.nodes[a.node_id].requires_grad;
        self.push(value, op, rg)
    }

    /// `|x|`, with subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Abs(a.node_id), f64::abs)
    }

    /// `log(max(x, LOG_FLOOR))`.
    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        if self.value(a).data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "log",
                detail: "NaN input".into(),
            });
        }
        Ok(self.unary(a, Op::Log(a.node_id), |x| x.max(LOG_FLOOR).ln()))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Exp(a.node_id), f64::exp)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Relu(a.node_id), |x| {
            if x > 0.0 || x.is_nan() {
                x
            } else {
                0.0
            }
        })
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, Op::Scale(a.node_id, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, Op::AddScalar(a.node_id), |x| x + s)
    }

    /// Dispatches one of the element-wise ops by name. Unary ops ignore `b`.
    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: Tensor,
        b: Option<Tensor>,
    ) -> Result<Tensor> {
        let need_b = || b.ok_or_else(|| Error::contract(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Div => self.div(a, need_b()?),
            ElementwiseOp::Abs => Ok(self.abs(a)),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Exp => Ok(self.exp(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::ScalarMul(s) => Ok(self.scale(a, s)),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, logits: Tensor) -> Result<Tensor> {
        let v = self.value(logits);
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite logits".into(),
            });
        }
        let mut out = v.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.nodes[logits.node_id].requires_grad;
        Ok(self.push(out, Op::Softmax(logits.node_id), rg))
    }

    /// `[n×c] -> [n×1]`.
    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a);
        let sums = v.iter_rows().map(|r| r.iter().sum()).collect();
        let rg = self.nodes[a.node_id].requires_grad;
        self.push(Matrix::column(sums), Op::RowSum(a.node_id), rg)
    }

    /// Sum of all entries as a `[1×1]` tensor.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.value(a).sum();
        let rg = self.nodes[a.node_id].requires_grad;
        self.push(Matrix::scalar(s), Op::Sum(a.node_id), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Back-propagates from a `[1×1]` loss, adding into every `requires_grad`
    /// node's gradient buffer.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !self.nodes[loss.node_id].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.node_id + 1];
        adj[loss.node_id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.node_id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let mut send = |target: usize, contrib: Matrix| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut adj[target] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Reduces a gradient to the shape of a possibly broadcast `[1×1]` operand.
        let fit = |target: usize, contrib: Matrix| -> Matrix {
            if nodes[target].value.shape() == contrib.shape() {
                contrib
            } else {
                Matrix::scalar(contrib.sum())
            }
        };
        let val = |i: usize| &nodes[i].value;
        // Broadcast-aware operand lookup for the right-hand side of binary ops.
        let expand = |i: usize, shape: (usize, usize)| -> Matrix {
            let v = val(i);
            if v.shape() == shape {
                v.clone()
            } else {
                Matrix::filled(shape.0, shape.1, v.data()[0])
            }
        };

        match nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if nodes[a].requires_grad {
                    send(a, g.matmul_nt(val(b)));
                }
                if nodes[b].requires_grad {
                    send(b, val(a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                send(a, g.clone());
                send(b, fit(b, g.clone()));
            }
            Op::Sub(a, b) => {
                send(a, g.clone());
                send(b, fit(b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let vb = expand(b, g.shape());
                send(a, g.zip_map(&vb, |g, y| g * y));
                send(b, fit(b, g.zip_map(val(a), |g, x| g * x)));
            }
            Op::Div(a, b) => {
                let vb = expand(b, g.shape());
                send(a, g.zip_map(&vb, |g, y| g / y));
                let ga = g.zip_map(val(a), |g, x| g * x);
                send(b, fit(b, ga.zip_map(&vb, |gx, y| -gx / (y * y))));
            }
            Op::AddRow(a, row) => {
                send(a, g.clone());
                let mut sums = Matrix::zeros(1, g.cols());
                for r in g.iter_rows() {
                    for (s, x) in sums.data_mut().iter_mut().zip(r) {
                        *s += x;
                    }
                }
                send(row, sums);
            }
            Op::Abs(a) => send(
                a,
                g.zip_map(val(a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Log(a) => send(
                a,
                g.zip_map(val(a), |g, x| if x > LOG_FLOOR { g / x } else { 0.0 }),
            ),
            Op::Exp(a) => send(a, g.zip_map(val(id), |g, y| g * y)),
            Op::Relu(a) => send(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Scale(a, s) => send(a, g.map(|x| x * s)),
            Op::AddScalar(a) => send(a, g.clone()),
            Op::Softmax(a) => {
                let y = val(id);
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(a, out);
            }
            Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    out.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                send(a, out);
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                send(a, Matrix::filled(r, c, g.data()[0]));
            }
        }
    }
}

/// Maximum relative error between the tape gradient and central differences
/// for a scalar function of several inputs.
///
/// Coordinates closer than `10h` to zero are nudged to `±10h` first, which
/// keeps the stencil off the `abs`/`relu` kink at the origin.
pub fn grad_check_multi<F>(f: F, points: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let points: Vec<Matrix> = points
        .iter()
        .map(|p| {
            p.map(|x| {
                if x.abs() < 10.0 * h {
                    if x < 0.0 {
                        -10.0 * h
                    } else {
                        10.0 * h
                    }
                } else {
                    x
                }
            })
        })
        .collect();

    let mut tape = Tape::new();
    let inputs: Vec<Tensor> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Matrix> = inputs.iter().map(|&t| tape.grad(t)).collect();

    let eval = |pts: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let inputs: Vec<Tensor> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &inputs)?;
        Ok(tape.item(out))
    };

    let mut worst = 0.0f64;
    let mut work = points.clone();
    for (k, point) in points.iter().enumerate() {
        for i in 0..point.len() {
            let x = point.data()[i];
            work[k].data_mut()[i] = x + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, point: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), h)
}
