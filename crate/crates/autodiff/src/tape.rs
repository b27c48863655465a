//! The recording tape and differentiable variables.
//!
//! A [`Tape`] records every operation whose inputs depend on a leaf created
//! with [`Tape::leaf`]. Values that do not depend on any leaf are constants:
//! they carry their value but never enter the node list, so temporaries are
//! dropped as soon as their last handle goes away.
//!
//! [`Tape::grad`] sweeps the recorded nodes in reverse. Each vector-Jacobian
//! product is itself written with `Var` operations, so with
//! `create_graph = true` the gradients are recorded too and can be
//! differentiated again. This is what lets an optimizer loop whose updates
//! use gradients be unrolled and differentiated end to end.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    MatMul { ta: bool, tb: bool },
    Transpose,
    Sum,
    SumRows,
    SumCols,
    RowSqNorm,
    Broadcast,
    Square,
    Sqrt,
    RecipOrZero,
    Exp,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    SqLeakyRelu(f64),
    Relu,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::RowSqNorm => "row_sq_norm",
            Op::Broadcast => "broadcast",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::RecipOrZero => "recip_or_zero",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::SqLeakyRelu(_) => "sq_leaky_relu",
            Op::Relu => "relu",
        }
    }
}

#[derive(Clone)]
struct Input {
    id: Option<usize>,
    value: Rc<Tensor>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Rc<Tensor>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Append-only record of differentiable operations.
///
/// Cloning a `Tape` yields another handle to the same record. A tape is
/// single-threaded; independent computations should use independent tapes.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A variable that gradients can be taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var {
        let value = Rc::new(value);
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                value: value.clone(),
            });
            inner.nodes.len() - 1
        };
        Var {
            tape: self.clone(),
            id: Some(id),
            value,
        }
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            tape: self.clone(),
            id: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn record(&self, op: Op, inputs: &[&Var], value: Tensor) -> Result<Var> {
        if inputs.iter().any(|v| !self.same(&v.tape)) {
            return Err(AdError::ForeignTape);
        }
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: op.name() });
        }
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let tracked = inner.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        let id = if tracked {
            inner.nodes.push(Node {
                op,
                inputs: inputs
                    .iter()
                    .map(|v| Input {
                        id: v.id,
                        value: v.value.clone(),
                    })
                    .collect(),
                value: value.clone(),
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        drop(inner);
        Ok(Var {
            tape: self.clone(),
            id,
            value,
        })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// `wrt` may name leaves or intermediate variables; the result for an
    /// intermediate is the adjoint at that node. Variables that `output` does
    /// not depend on receive zeros. With `create_graph` the returned gradients
    /// are themselves recorded and can be differentiated again.
    pub fn grad(&self, output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
        if output.value.len() != 1 {
            return Err(AdError::NotScalar {
                shape: output.value.shape().to_vec(),
            });
        }
        if !self.same(&output.tape) || wrt.iter().any(|v| !self.same(&v.tape)) {
            return Err(AdError::ForeignTape);
        }
        let zeros = |v: &Var| self.constant(Tensor::zeros(v.value.shape()));

        let out_id = match output.id {
            Some(id) => id,
            None => return Ok(wrt.iter().map(|v| zeros(v)).collect()),
        };
        let targets: Vec<usize> = wrt.iter().filter_map(|v| v.id).filter(|&id| id <= out_id).collect();
        let Some(&lo) = targets.iter().min() else {
            return Ok(wrt.iter().map(|v| zeros(v)).collect());
        };
        let span = out_id - lo + 1;

        // A node is relevant when some target is reachable from it.
        let mut is_target = vec![false; span];
        for &t in &targets {
            is_target[t - lo] = true;
        }
        let mut relevant = is_target.clone();
        {
            let inner = self.inner.borrow();
            for id in lo..=out_id {
                if relevant[id - lo] {
                    continue;
                }
                relevant[id - lo] = inner.nodes[id]
                    .inputs
                    .iter()
                    .any(|inp| matches!(inp.id, Some(j) if j >= lo && relevant[j - lo]));
            }
        }

        let previous = std::mem::replace(&mut self.inner.borrow_mut().grad_enabled, create_graph);
        let swept = self.sweep(out_id, lo, &relevant, &is_target, output);
        self.inner.borrow_mut().grad_enabled = previous;
        let found = swept?;

        Ok(wrt
            .iter()
            .map(|v| match v.id {
                Some(id) if id >= lo && id <= out_id => found[id - lo].clone().unwrap_or_else(|| zeros(v)),
                _ => zeros(v),
            })
            .collect())
    }

    fn sweep(
        &self,
        out_id: usize,
        lo: usize,
        relevant: &[bool],
        is_target: &[bool],
        output: &Var,
    ) -> Result<Vec<Option<Var>>> {
        let span = out_id - lo + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; span];
        let mut found: Vec<Option<Var>> = vec![None; span];
        adjoint[span - 1] = Some(self.constant(Tensor::full(output.value.shape(), 1.0)));

        for id in (lo..=out_id).rev() {
            let k = id - lo;
            let Some(g) = adjoint[k].take() else { continue };
            if is_target[k] {
                found[k] = Some(g.clone());
            }
            let (op, inputs, value) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[id];
                (node.op.clone(), node.inputs.clone(), node.value.clone())
            };
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|inp| matches!(inp.id, Some(j) if j >= lo && relevant[j - lo]))
                .collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let in_vars: Vec<Var> = inputs
                .iter()
                .map(|inp| Var {
                    tape: self.clone(),
                    id: inp.id,
                    value: inp.value.clone(),
                })
                .collect();
            let out_var = Var {
                tape: self.clone(),
                id: Some(id),
                value,
            };
            let grads = vjp(&op, &in_vars, &out_var, &g, &wanted)?;
            for ((inp, gi), w) in inputs.iter().zip(grads).zip(&wanted) {
                if !*w {
                    continue;
                }
                let (Some(j), Some(gi)) = (inp.id, gi) else { continue };
                let slot = &mut adjoint[j - lo];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        Ok(found)
    }

    /// Plain gradient values: [`Tape::grad`] without recording.
    pub fn backward(&self, output: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        Ok(self
            .grad(output, wrt, false)?
            .into_iter()
            .map(|v| (*v.value).clone())
            .collect())
    }
}

/// Vector-Jacobian products, written with `Var` ops so they can be recorded.
fn vjp(op: &Op, x: &[Var], out: &Var, g: &Var, wanted: &[bool]) -> Result<Vec<Option<Var>>> {
    let tape = &g.tape;
    let one = |v: Var| Ok(vec![Some(v)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), Some(g.neg()?)]),
        Op::Mul => Ok(vec![
            if wanted[0] { Some(g.mul(&x[1])?) } else { None },
            if wanted[1] { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if wanted[0] { Some(g.div(&x[1])?) } else { None },
            if wanted[1] { Some(g.mul(out)?.div(&x[1])?.neg()?) } else { None },
        ]),
        Op::Neg => one(g.neg()?),
        Op::Scale(c) => one(g.scale(*c)?),
        Op::AddScalar(_) => one(g.clone()),
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let ga = if !wanted[0] {
                None
            } else if *ta {
                Some(b.matmul_t(g, *tb, true)?)
            } else {
                Some(g.matmul_t(b, false, !*tb)?)
            };
            let gb = if !wanted[1] {
                None
            } else if *tb {
                Some(g.matmul_t(a, true, *ta)?)
            } else {
                Some(a.matmul_t(g, !*ta, false)?)
            };
            Ok(vec![ga, gb])
        }
        Op::Transpose => one(g.transpose()?),
        Op::Sum => one(g.broadcast_to(x[0].value.shape())?),
        Op::SumRows | Op::SumCols => one(g.broadcast_to(x[0].value.shape())?),
        Op::RowSqNorm => one(g.broadcast_to(x[0].value.shape())?.mul(&x[0])?.scale(2.0)?),
        Op::Broadcast => {
            let src = x[0].value.shape();
            let dst = g.value.shape();
            let reduced = if src.is_empty() {
                g.sum()?
            } else {
                let mut r = g.clone();
                if src[0] == 1 && dst[0] != 1 {
                    r = r.sum_rows()?;
                }
                if src[1] == 1 && dst[1] != 1 {
                    r = r.sum_cols()?;
                }
                r
            };
            one(reduced)
        }
        Op::Square => one(g.mul(&x[0])?.scale(2.0)?),
        Op::Sqrt => one(g.mul(&out.recip_or_zero()?)?.scale(0.5)?),
        Op::RecipOrZero => one(g.mul(&out.square()?)?.neg()?),
        Op::Exp => one(g.mul(out)?),
        Op::Sigmoid => {
            let s = out.mul(&out.neg()?.add_scalar(1.0)?)?;
            one(g.mul(&s)?)
        }
        Op::Softplus => one(g.mul(&x[0].sigmoid()?)?),
        Op::LeakyRelu(beta) => {
            let slope = tape.constant(x[0].value.map(|v| tensor::leaky_slope(v, *beta)));
            one(g.mul(&slope)?)
        }
        Op::SqLeakyRelu(beta) => {
            let slope = tape.constant(x[0].value.map(|v| tensor::leaky_slope(v, *beta)));
            let inner = x[0].leaky_relu(*beta)?;
            one(g.mul(&inner)?.mul(&slope)?.scale(2.0)?)
        }
        Op::Relu => {
            let mask = tape.constant(x[0].value.map(|v| if v >= 0.0 { 1.0 } else { 0.0 }));
            one(g.mul(&mask)?)
        }
    }
}

/// A value on a [`Tape`], possibly recorded for differentiation.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Whether this value depends on a leaf through recorded operations.
    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// The same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var {
            tape: self.tape.clone(),
            id: None,
            value: self.value.clone(),
        }
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.value.rank2(op.name())?;
        let v = self.value.map(f);
        self.tape.record(op, &[self], v)
    }

    /// Brings two operands to a common shape along singleton axes.
    fn align(&self, other: &Var, op: &'static str) -> Result<(Var, Var)> {
        let (a, b) = (self.shape(), other.shape());
        if a == b {
            return Ok((self.clone(), other.clone()));
        }
        let mismatch = || AdError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        let target = match (a.len(), b.len()) {
            (0, _) => b.to_vec(),
            (_, 0) => a.to_vec(),
            (2, 2) => {
                let pick = |x: usize, y: usize| match (x, y) {
                    _ if x == y => Ok(x),
                    (1, y) => Ok(y),
                    (x, 1) => Ok(x),
                    _ => Err(mismatch()),
                };
                vec![pick(a[0], b[0])?, pick(a[1], b[1])?]
            }
            _ => return Err(mismatch()),
        };
        Ok((self.broadcast_to(&target)?, other.broadcast_to(&target)?))
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        let (a, b) = self.align(other, name)?;
        let v = a.value.zip_map(&b.value, name, f)?;
        self.tape.record(op, &[&a, &b], v)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), |v| c * v)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c), |v| v + c)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposition of either side.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        let v = tensor::matmul(&self.value, &other.value, ta, tb)?;
        self.tape.record(Op::MatMul { ta, tb }, &[self, other], v)
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = tensor::transpose(&self.value)?;
        self.tape.record(Op::Transpose, &[self], v)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var> {
        let s = self.value.data().iter().sum();
        self.tape.record(Op::Sum, &[self], Tensor::scalar(s))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.len().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// `[r, c] -> [1, c]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let v = tensor::sum_rows(&self.value)?;
        self.tape.record(Op::SumRows, &[self], v)
    }

    /// `[r, c] -> [r, 1]`.
    pub fn sum_cols(&self) -> Result<Var> {
        let v = tensor::sum_cols(&self.value)?;
        self.tape.record(Op::SumCols, &[self], v)
    }

    /// Squared Euclidean norm of each row, `[r, c] -> [r, 1]`.
    pub fn row_sq_norm(&self) -> Result<Var> {
        let v = tensor::row_sq_norm(&self.value)?;
        self.tape.record(Op::RowSqNorm, &[self], v)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = tensor::broadcast(&self.value, shape)?;
        self.tape.record(Op::Broadcast, &[self], v)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary(Op::Square, |v| v * v)
    }

    /// Square root; its derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Result<Var> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    /// `1/x`, with `0` mapped to `0`.
    pub fn recip_or_zero(&self) -> Result<Var> {
        self.unary(Op::RecipOrZero, |v| if v == 0.0 { 0.0 } else { 1.0 / v })
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Op::Sigmoid, tensor::sigmoid)
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(Op::Softplus, tensor::softplus)
    }

    /// `max(beta * x, x)` for `0 <= beta <= 1`.
    pub fn leaky_relu(&self, beta: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(beta), |v| tensor::leaky_relu(v, beta))
    }

    /// `max(beta * x, x)^2`.
    pub fn sq_leaky_relu(&self, beta: f64) -> Result<Var> {
        self.unary(Op::SqLeakyRelu(beta), |v| {
            let l = tensor::leaky_relu(v, beta);
            l * l
        })
    }

    /// `max(x, 0)`.
    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }
}
