//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! A [`Tape`] records every scalar operation as a node holding its value and
//! the local partial derivatives with respect to its parents. Parents always
//! have smaller indices than their children, so a single reverse sweep from
//! the root accumulates all adjoints.
//!
//! Operations never panic on bad input. A domain violation (logarithm of a
//! non-positive number, division by zero) or a non-finite result poisons the
//! tape: the offending node gets a NaN value, the first error is remembered,
//! and [`Tape::backward`] reports it.
//!
//! ```
//! use epical::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.lift(3.0).unwrap();
//! let y = tape.lift(5.0).unwrap();
//! let f = x * x * y;
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(x), 30.0);
//! assert_eq!(grads.wrt(y), 9.0);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Failures raised by the tape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("non-finite value {value} produced by `{op}`")]
    InvalidValue { op: &'static str, value: f64 },
    #[error("domain error in `{op}`")]
    DomainError { op: &'static str },
    #[error("variable belongs to a cleared tape")]
    StaleTape,
}

#[derive(Clone, Copy)]
struct Span {
    start: u32,
    len: u32,
}

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    spans: Vec<Span>,
    // (parent index, local partial) pairs, addressed through `spans`.
    edges: Vec<(u32, f64)>,
}

/// A growable record of scalar operations.
///
/// Single-threaded by construction. Each calibration or sampling chain owns
/// its own tape.
pub struct Tape {
    nodes: RefCell<Nodes>,
    generation: Cell<u32>,
    poison: RefCell<Option<AdError>>,
}

/// A scalar living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    generation: u32,
    value: f64,
}

/// Adjoints of every node on the tape after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
    generation: u32,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("generation", &self.generation.get())
            .finish()
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Nodes::default()),
            generation: Cell::new(0),
            poison: RefCell::new(None),
        }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let tape = Tape::new();
        {
            let mut n = tape.nodes.borrow_mut();
            n.values.reserve(nodes);
            n.spans.reserve(nodes);
            n.edges.reserve(2 * nodes);
        }
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node. Variables created before the call become stale.
    pub fn clear(&self) {
        let mut n = self.nodes.borrow_mut();
        n.values.clear();
        n.spans.clear();
        n.edges.clear();
        self.generation.set(self.generation.get().wrapping_add(1));
        *self.poison.borrow_mut() = None;
    }

    /// The first error recorded since the last [`Tape::clear`], if any.
    pub fn status(&self) -> Result<(), AdError> {
        match &*self.poison.borrow() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Creates a leaf node.
    pub fn lift(&self, x: f64) -> Result<Var<'_>, AdError> {
        if !x.is_finite() {
            return Err(AdError::InvalidValue { op: "lift", value: x });
        }
        Ok(self.push("lift", x, &[]))
    }

    /// Leaf node without the finiteness check, used for constants that are
    /// already known to be finite.
    pub(crate) fn constant(&self, x: f64) -> Var<'_> {
        self.push("constant", x, &[])
    }

    fn record(&self, err: AdError) {
        let mut p = self.poison.borrow_mut();
        if p.is_none() {
            *p = Some(err);
        }
    }

    fn push(&self, op: &'static str, value: f64, parents: &[(u32, f64)]) -> Var<'_> {
        if !value.is_finite() {
            self.record(AdError::InvalidValue { op, value });
        }
        let mut n = self.nodes.borrow_mut();
        let index = n.values.len() as u32;
        let start = n.edges.len() as u32;
        n.edges.extend_from_slice(parents);
        n.spans.push(Span {
            start,
            len: parents.len() as u32,
        });
        n.values.push(value);
        Var {
            tape: self,
            index,
            generation: self.generation.get(),
            value,
        }
    }

    fn push_iter(&self, op: &'static str, value: f64, parents: impl Iterator<Item = (u32, f64)>) -> Var<'_> {
        if !value.is_finite() {
            self.record(AdError::InvalidValue { op, value });
        }
        let mut n = self.nodes.borrow_mut();
        let index = n.values.len() as u32;
        let start = n.edges.len() as u32;
        n.edges.extend(parents);
        let len = n.edges.len() as u32 - start;
        n.spans.push(Span { start, len });
        n.values.push(value);
        Var {
            tape: self,
            index,
            generation: self.generation.get(),
            value,
        }
    }

    fn domain_error(&self, op: &'static str) -> Var<'_> {
        self.record(AdError::DomainError { op });
        // NaN would trigger a second, less specific record; push directly.
        let mut n = self.nodes.borrow_mut();
        let index = n.values.len() as u32;
        let start = n.edges.len() as u32;
        n.spans.push(Span { start, len: 0 });
        n.values.push(f64::NAN);
        Var {
            tape: self,
            index,
            generation: self.generation.get(),
            value: f64::NAN,
        }
    }

    /// `Σ w_i x_i + bias` with variable weights and constant inputs.
    ///
    /// One node with `w.len() + 1` parents instead of `2 n` binary nodes.
    pub fn affine_const<'t>(&'t self, weights: &[Var<'t>], inputs: &[f64], bias: Var<'t>) -> Var<'t> {
        debug_assert_eq!(weights.len(), inputs.len());
        let value = weights
            .iter()
            .zip(inputs)
            .fold(bias.value, |acc, (w, x)| acc + w.value * x);
        self.push_iter(
            "affine",
            value,
            weights
                .iter()
                .zip(inputs)
                .map(|(w, &x)| (w.index, x))
                .chain(std::iter::once((bias.index, 1.0))),
        )
    }

    /// `Σ w_i h_i + bias` where both factors are variables.
    pub fn affine<'t>(&'t self, weights: &[Var<'t>], inputs: &[Var<'t>], bias: Var<'t>) -> Var<'t> {
        debug_assert_eq!(weights.len(), inputs.len());
        let value = weights
            .iter()
            .zip(inputs)
            .fold(bias.value, |acc, (w, h)| acc + w.value * h.value);
        self.push_iter(
            "affine",
            value,
            weights
                .iter()
                .zip(inputs)
                .flat_map(|(w, h)| [(w.index, h.value), (h.index, w.value)])
                .chain(std::iter::once((bias.index, 1.0))),
        )
    }

    /// Sum of any number of variables as a single node.
    pub fn sum<'t>(&'t self, terms: &[Var<'t>]) -> Var<'t> {
        let value = terms.iter().map(|v| v.value).sum();
        self.push_iter("sum", value, terms.iter().map(|v| (v.index, 1.0)))
    }

    /// Reverse sweep from `root`.
    ///
    /// Each call starts from zeroed adjoints, so repeated calls return the
    /// same result.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        if root.generation != self.generation.get() || !std::ptr::eq(root.tape, self) {
            return Err(AdError::StaleTape);
        }
        self.status()?;
        let n = self.nodes.borrow();
        let mut adjoints = vec![0.0; n.values.len()];
        adjoints[root.index as usize] = 1.0;
        for i in (0..=root.index as usize).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let span = n.spans[i];
            for &(p, d) in &n.edges[span.start as usize..(span.start + span.len) as usize] {
                adjoints[p as usize] += a * d;
            }
        }
        Ok(Gradients {
            adjoints,
            generation: self.generation.get(),
        })
    }
}

impl Gradients {
    /// Adjoint of `v`. Zero for nodes the root does not depend on.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        debug_assert_eq!(v.generation, self.generation);
        self.adjoints.get(v.index as usize).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: &'static str, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(op, value, &[(self.index, partial)])
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary("exp", e, e)
    }

    pub fn ln(self) -> Var<'t> {
        if self.value <= 0.0 {
            return self.tape.domain_error("ln");
        }
        self.unary("ln", self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        if self.value < 0.0 {
            return self.tape.domain_error("sqrt");
        }
        let s = self.value.sqrt();
        self.unary("sqrt", s, 0.5 / s)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary("tanh", t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary("sigmoid", s, s * (1.0 - s))
    }

    /// `|x|` with subgradient 0 at exactly 0.
    pub fn abs(self) -> Var<'t> {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary("abs", self.value.abs(), d)
    }

    pub fn recip(self) -> Var<'t> {
        if self.value == 0.0 {
            return self.tape.domain_error("div");
        }
        let r = 1.0 / self.value;
        self.unary("recip", r, -r * r)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let d = if n == 0 { 0.0 } else { n as f64 * self.value.powi(n - 1) };
        self.unary("powi", self.value.powi(n), d)
    }

    /// `x^p` for a constant real exponent. Requires `x > 0` unless `p` is an
    /// integer.
    pub fn powf(self, p: f64) -> Var<'t> {
        if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
            return self.powi(p as i32);
        }
        if self.value < 0.0 {
            return self.tape.domain_error("pow");
        }
        let v = self.value.powf(p);
        self.unary("pow", v, p * self.value.powf(p - 1.0))
    }

    /// `x^y` with both operands variable. Requires `x > 0`.
    pub fn pow(self, y: Var<'t>) -> Var<'t> {
        if self.value <= 0.0 {
            return self.tape.domain_error("pow");
        }
        let v = self.value.powf(y.value);
        let dx = y.value * self.value.powf(y.value - 1.0);
        let dy = v * self.value.ln();
        self.tape.push("pow", v, &[(self.index, dx), (y.index, dy)])
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

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push("add", self.value + rhs.value, &[(self.index, 1.0), (rhs.index, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push("sub", self.value - rhs.value, &[(self.index, 1.0), (rhs.index, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            "mul",
            self.value * rhs.value,
            &[(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.value == 0.0 {
            return self.tape.domain_error("div");
        }
        let q = self.value / rhs.value;
        self.tape
            .push("div", q, &[(self.index, 1.0 / rhs.value), (rhs.index, -q / rhs.value)])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary("neg", -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary("add", self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary("sub", self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary("mul", self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            return self.tape.domain_error("div");
        }
        self.unary("div", self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary("sub", self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.value == 0.0 {
            return rhs.tape.domain_error("div");
        }
        let q = self / rhs.value;
        rhs.unary("div", q, -q / rhs.value)
    }
}

/// Arithmetic shared by plain floats and tape variables, so that models and
/// integrators are written once.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant in the same arithmetic as `self`.
    fn constant_like(&self, x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn abs(self) -> Self;
    fn recip(self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

impl<'t> Real for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn constant_like(&self, x: f64) -> Self {
        self.tape.constant(x)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
    fn powi(self, n: i32) -> Self {
        Var::powi(self, n)
    }
}
