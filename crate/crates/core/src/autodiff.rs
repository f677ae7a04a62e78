//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every elementary operation performed on [`Var`] handles
//! during a forward pass (here: an entire particle rollout), together with the
//! local partial derivatives. [`Tape::backward`] then propagates adjoints in
//! reverse topological order and returns the gradient with respect to every
//! registered parameter slot.
//!
//! Reverse mode is the right choice here: the losses are scalar while the
//! parameter count runs into the thousands, so one backward sweep yields the
//! full gradient.
//!
//! The [`Scalar`] trait lets the same numeric code run either on plain `f64`
//! (fast, untaped evaluation) or on `Var` (taped, differentiable). Both paths
//! execute identical floating-point expressions in identical order, so taped
//! and untaped forward values agree bit for bit.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Error raised when a recorded graph cannot be differentiated.
#[derive(Debug, Clone, PartialEq)]
pub enum AdError {
    /// A node with a non-finite forward value was recorded (division by zero,
    /// overflow, sqrt of a negative number, ...). Carries the node index.
    NonFinite { node: usize },
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::NonFinite { node } => {
                write!(f, "non-finite value recorded at tape node {node}")
            }
        }
    }
}

impl std::error::Error for AdError {}

#[derive(Clone, Copy, Debug)]
enum Node {
    /// Constant or non-differentiable input; no parents.
    Leaf,
    /// Gradient root: `slot` indexes the output of [`Tape::backward`].
    Param { slot: u32 },
    Unary {
        parent: u32,
        partial: f64,
    },
    Binary {
        parents: [u32; 2],
        partials: [f64; 2],
    },
    /// Sum of `len` parents, each with the same local partial `scale`.
    /// Records means and sums over particle ensembles in a single node.
    SumScaled {
        start: u32,
        len: u32,
        scale: f64,
    },
    /// Linear combination with per-parent partials stored in the side
    /// arrays. Used for fused affine layers (`w . x + b`). Parent indices
    /// and partials live in different side arrays, so each carries its own
    /// offset (sum/mean nodes push parents without partials).
    LinComb {
        astart: u32,
        pstart: u32,
        len: u32,
    },
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    nodes: Vec<Node>,
    args: Vec<u32>,
    arg_partials: Vec<f64>,
    n_slots: usize,
    first_non_finite: Option<usize>,
}

/// Append-only record of a forward computation.
///
/// Single-writer: one tape per rollout. `clear` retains the allocated
/// capacity so a training loop can reuse one tape across iterations.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes and parameter slots, keeping capacity.
    pub fn clear(&self) {
        let mut t = self.inner.borrow_mut();
        t.values.clear();
        t.nodes.clear();
        t.args.clear();
        t.arg_partials.clear();
        t.n_slots = 0;
        t.first_non_finite = None;
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of registered parameter slots.
    pub fn n_slots(&self) -> usize {
        self.inner.borrow().n_slots
    }

    fn push(&self, node: Node, value: f64) -> Var<'_> {
        let mut t = self.inner.borrow_mut();
        let index = t.nodes.len() as u32;
        if !value.is_finite() && t.first_non_finite.is_none() {
            t.first_non_finite = Some(index as usize);
        }
        t.nodes.push(node);
        t.values.push(value);
        drop(t);
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Lifts a constant. Constants carry no gradient.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Node::Leaf, value)
    }

    /// Lifts a parameter and marks it as a gradient root for `slot`.
    pub fn param(&self, slot: usize, value: f64) -> Var<'_> {
        let var = self.push(Node::Param { slot: slot as u32 }, value);
        let mut t = self.inner.borrow_mut();
        t.n_slots = t.n_slots.max(slot + 1);
        var
    }

    fn check_same_tape(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "Var belongs to a different tape"
        );
    }

    /// Sequential sum of `xs` (left to right), recorded as one node.
    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        self.sum_scaled(xs, 1.0, false)
    }

    /// Arithmetic mean of `xs`, recorded as one node with `len` parents.
    ///
    /// This is the node through which gradients flow from each particle into
    /// the empirical-measure coupling of a rollout.
    pub fn mean<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "mean of empty slice");
        self.sum_scaled(xs, 1.0 / xs.len() as f64, true)
    }

    fn sum_scaled<'t>(&'t self, xs: &[Var<'t>], scale: f64, divide: bool) -> Var<'t> {
        let mut acc = 0.0;
        for x in xs {
            self.check_same_tape(*x);
            acc += x.value;
        }
        let value = if divide { acc / xs.len() as f64 } else { acc };
        let start = {
            let mut t = self.inner.borrow_mut();
            let start = t.args.len() as u32;
            t.args.extend(xs.iter().map(|x| x.index));
            start
        };
        self.push(
            Node::SumScaled {
                start,
                len: xs.len() as u32,
                scale,
            },
            value,
        )
    }

    /// Fused affine form `sum_i ws[i]*xs[i] + bias`, recorded as one node.
    pub fn dot_affine<'t>(&'t self, ws: &[Var<'t>], xs: &[Var<'t>], bias: Var<'t>) -> Var<'t> {
        assert_eq!(ws.len(), xs.len(), "dot_affine length mismatch");
        self.check_same_tape(bias);
        let mut acc = 0.0;
        for (w, x) in ws.iter().zip(xs) {
            self.check_same_tape(*w);
            self.check_same_tape(*x);
            acc += w.value * x.value;
        }
        let value = acc + bias.value;
        let (astart, pstart) = {
            let mut t = self.inner.borrow_mut();
            let astart = t.args.len() as u32;
            let pstart = t.arg_partials.len() as u32;
            for (w, x) in ws.iter().zip(xs) {
                t.args.push(w.index);
                t.arg_partials.push(x.value);
            }
            for (w, x) in ws.iter().zip(xs) {
                t.args.push(x.index);
                t.arg_partials.push(w.value);
            }
            t.args.push(bias.index);
            t.arg_partials.push(1.0);
            (astart, pstart)
        };
        self.push(
            Node::LinComb {
                astart,
                pstart,
                len: (2 * ws.len() + 1) as u32,
            },
            value,
        )
    }

    /// Reverse sweep from the scalar `loss`, visiting nodes in strictly
    /// decreasing index order. Returns `dloss/dtheta` for every parameter
    /// slot. Does not mutate the tape, so repeated calls give identical
    /// results.
    pub fn backward(&self, loss: Var<'_>) -> Result<Vec<f64>, AdError> {
        self.check_same_tape(loss);
        let t = self.inner.borrow();
        if let Some(node) = t.first_non_finite {
            if node <= loss.index as usize {
                return Err(AdError::NonFinite { node });
            }
        }
        let n = loss.index as usize + 1;
        let mut adjoint = vec![0.0f64; n];
        adjoint[loss.index as usize] = 1.0;
        let mut grad = vec![0.0f64; t.n_slots];
        for i in (0..n).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            match t.nodes[i] {
                Node::Leaf => {}
                Node::Param { slot } => grad[slot as usize] += a,
                Node::Unary { parent, partial } => {
                    adjoint[parent as usize] += a * partial;
                }
                Node::Binary { parents, partials } => {
                    adjoint[parents[0] as usize] += a * partials[0];
                    adjoint[parents[1] as usize] += a * partials[1];
                }
                Node::SumScaled { start, len, scale } => {
                    let s = a * scale;
                    for k in start..start + len {
                        adjoint[t.args[k as usize] as usize] += s;
                    }
                }
                Node::LinComb {
                    astart,
                    pstart,
                    len,
                } => {
                    for k in 0..len {
                        adjoint[t.args[(astart + k) as usize] as usize] +=
                            a * t.arg_partials[(pstart + k) as usize];
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Handle to one tape node; cheap to copy and carries the forward value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(
            Node::Unary {
                parent: self.index,
                partial,
            },
            value,
        )
    }

    fn binary(self, rhs: Var<'t>, value: f64, d_self: f64, d_rhs: f64) -> Var<'t> {
        self.tape.check_same_tape(rhs);
        self.tape.push(
            Node::Binary {
                parents: [self.index, rhs.index],
                partials: [d_self, d_rhs],
            },
            value,
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.binary(
            rhs,
            self.value * inv,
            inv,
            -self.value * inv * inv,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dual-mode scalar: implemented by `f64` (plain evaluation) and by
/// [`Var`] (taped evaluation). Code written against this trait runs the
/// same floating-point operations on both paths.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Context needed to materialize constants: `()` for `f64`, the tape
    /// for `Var`.
    type Ctx: Copy;

    fn constant(ctx: Self::Ctx, value: f64) -> Self;
    /// Materializes a constant in the same context as `self` (same tape for
    /// `Var`); handy where no explicit context is threaded through.
    fn constant_like(self, value: f64) -> Self;
    fn val(self) -> f64;
    /// `self + c` for a plain constant, without lifting `c` onto the tape.
    fn add_c(self, c: f64) -> Self;
    /// `self * c` for a plain constant.
    fn mul_c(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    /// `max(self, 0)`; derivative at 0 is defined as 0.
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sqrt(self) -> Self;
    fn atan(self) -> Self;
    fn powi(self, n: i32) -> Self;
    /// Minimum by forward value; a tie routes the gradient to `self`.
    fn min_val(self, other: Self) -> Self;
    /// Maximum by forward value; a tie routes the gradient to `self`.
    fn max_val(self, other: Self) -> Self;
    /// Left-to-right sum.
    fn sum(xs: &[Self]) -> Self;
    /// Left-to-right sum divided by the length.
    fn mean(xs: &[Self]) -> Self;
    /// `sum_i ws[i]*xs[i] + bias`, accumulated left to right.
    fn dot_affine(ws: &[Self], xs: &[Self], bias: Self) -> Self;
}

impl Scalar for f64 {
    type Ctx = ();

    fn constant(_: (), value: f64) -> f64 {
        value
    }
    fn constant_like(self, value: f64) -> f64 {
        value
    }
    fn val(self) -> f64 {
        self
    }
    fn add_c(self, c: f64) -> f64 {
        self + c
    }
    fn mul_c(self, c: f64) -> f64 {
        self * c
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn sigmoid(self) -> f64 {
        sigmoid_f64(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn atan(self) -> f64 {
        f64::atan(self)
    }
    fn powi(self, n: i32) -> f64 {
        f64::powi(self, n)
    }
    fn min_val(self, other: f64) -> f64 {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max_val(self, other: f64) -> f64 {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn sum(xs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for x in xs {
            acc += x;
        }
        acc
    }
    fn mean(xs: &[f64]) -> f64 {
        assert!(!xs.is_empty(), "mean of empty slice");
        f64::sum(xs) / xs.len() as f64
    }
    fn dot_affine(ws: &[f64], xs: &[f64], bias: f64) -> f64 {
        assert_eq!(ws.len(), xs.len(), "dot_affine length mismatch");
        let mut acc = 0.0;
        for (w, x) in ws.iter().zip(xs) {
            acc += w * x;
        }
        acc + bias
    }
}

impl<'t> Scalar for Var<'t> {
    type Ctx = &'t Tape;

    fn constant(tape: &'t Tape, value: f64) -> Var<'t> {
        tape.constant(value)
    }
    fn constant_like(self, value: f64) -> Var<'t> {
        self.tape.constant(value)
    }
    fn val(self) -> f64 {
        self.value
    }
    fn add_c(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }
    fn mul_c(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
    fn exp(self) -> Var<'t> {
        let v = f64::exp(self.value);
        self.unary(v, v)
    }
    fn sin(self) -> Var<'t> {
        self.unary(f64::sin(self.value), f64::cos(self.value))
    }
    fn cos(self) -> Var<'t> {
        self.unary(f64::cos(self.value), -f64::sin(self.value))
    }
    fn tanh(self) -> Var<'t> {
        let v = f64::tanh(self.value);
        self.unary(v, 1.0 - v * v)
    }
    fn relu(self) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(self.value, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }
    fn sigmoid(self) -> Var<'t> {
        let v = sigmoid_f64(self.value);
        self.unary(v, v * (1.0 - v))
    }
    fn sqrt(self) -> Var<'t> {
        let v = f64::sqrt(self.value);
        self.unary(v, 0.5 / v)
    }
    fn atan(self) -> Var<'t> {
        self.unary(
            f64::atan(self.value),
            1.0 / (1.0 + self.value * self.value),
        )
    }
    fn powi(self, n: i32) -> Var<'t> {
        let v = f64::powi(self.value, n);
        let partial = if n == 0 {
            0.0
        } else {
            n as f64 * f64::powi(self.value, n - 1)
        };
        self.unary(v, partial)
    }
    fn min_val(self, other: Var<'t>) -> Var<'t> {
        self.tape.check_same_tape(other);
        if self.value <= other.value {
            self.unary(self.value, 1.0)
        } else {
            other.unary(other.value, 1.0)
        }
    }
    fn max_val(self, other: Var<'t>) -> Var<'t> {
        self.tape.check_same_tape(other);
        if self.value >= other.value {
            self.unary(self.value, 1.0)
        } else {
            other.unary(other.value, 1.0)
        }
    }
    fn sum(xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "sum of empty slice");
        xs[0].tape.sum(xs)
    }
    fn mean(xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "mean of empty slice");
        xs[0].tape.mean(xs)
    }
    fn dot_affine(ws: &[Var<'t>], xs: &[Var<'t>], bias: Var<'t>) -> Var<'t> {
        bias.tape.dot_affine(ws, xs, bias)
    }
}
