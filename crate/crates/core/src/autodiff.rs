//! Tape-based reverse-mode differentiation over `f64` scalars.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value and the local partial derivatives with respect to its
//! parents. [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints, so one backward pass yields the gradient of a scalar
//! output with respect to every variable on the tape.
//!
//! ```
//! use mirror_po::autodiff::gradient;
//!
//! let (value, grad) = gradient(&[3.0], |x| x[0] * x[0]);
//! assert_eq!(value, 9.0);
//! assert_eq!(grad, vec![6.0]);
//! ```
//!
//! Subgradient conventions at non-differentiable points:
//!
//! * `relu` has derivative 0 at 0.
//! * `clip(lo, hi)` has derivative 1 strictly inside `(lo, hi)` and 0 on and
//!   outside the boundaries.
//! * `pos_pow(p)` (i.e. `max(x, 0)^p` for `0 < p < 1`) has derivative 0 for
//!   `x <= 0` and the derivative at [`POS_POW_EPS`] for `0 < x <= POS_POW_EPS`,
//!   which keeps gradients finite at the kink.
//!
//! The [`Scalar`] trait abstracts over plain `f64` evaluation and taped
//! evaluation so the same loss code serves both value and gradient paths.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Lower clamp for the derivative of fractional powers of `max(x, 0)`.
pub const POS_POW_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
struct Node {
    value: f64,
    first_edge: usize,
    edge_count: usize,
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    parent: usize,
    partial: f64,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Append-only record of a scalar computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.value())
    }
}

/// Adjoints of every node on a tape after a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// d(output)/d(var).
    pub fn wrt(&self, var: &Var<'_>) -> f64 {
        self.adjoints[var.idx]
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(2 * nodes),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node so the allocation can be reused.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.edges.clear();
    }

    /// A differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(value, &[]);
        Var { tape: self, idx }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// A constant leaf. Identical to [`Tape::var`]; the adjoint is simply ignored.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    /// Sum of `vars` as a single node.
    pub fn sum(&self, vars: &[Var<'_>]) -> Var<'_> {
        let value = vars.iter().map(|v| v.value()).sum();
        let edges: Vec<(usize, f64)> = vars.iter().map(|v| (v.idx, 1.0)).collect();
        Var {
            tape: self,
            idx: self.push(value, &edges),
        }
    }

    /// `Σ coef·var` as a single node.
    pub fn linear(&self, terms: &[(Var<'_>, f64)]) -> Var<'_> {
        let value = terms.iter().map(|(v, c)| c * v.value()).sum();
        let edges: Vec<(usize, f64)> = terms.iter().map(|(v, c)| (v.idx, *c)).collect();
        Var {
            tape: self,
            idx: self.push(value, &edges),
        }
    }

    fn push(&self, value: f64, parents: &[(usize, f64)]) -> usize {
        let mut inner = self.inner.borrow_mut();
        let first_edge = inner.edges.len();
        inner
            .edges
            .extend(parents.iter().map(|&(parent, partial)| Edge { parent, partial }));
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            first_edge,
            edge_count: parents.len(),
        });
        idx
    }

    fn value_of(&self, idx: usize) -> f64 {
        self.inner.borrow().nodes[idx].value
    }

    /// Reverse sweep seeded with d(output)/d(output) = 1.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let mut adjoints = vec![0.0; inner.nodes.len()];
        adjoints[output.idx] = 1.0;
        for idx in (0..=output.idx).rev() {
            let g = adjoints[idx];
            if g == 0.0 {
                continue;
            }
            let node = inner.nodes[idx];
            for edge in &inner.edges[node.first_edge..node.first_edge + node.edge_count] {
                adjoints[edge.parent] += g * edge.partial;
            }
        }
        Gradients { adjoints }
    }
}

/// Value and gradient of `f` at `inputs`.
pub fn gradient<F>(inputs: &[f64], f: F) -> (f64, Vec<f64>)
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::with_capacity(64);
    let vars = tape.vars(inputs);
    let out = f(&vars);
    let grads = tape.backward(out);
    (out.value(), grads.wrt_all(&vars))
}

/// Central finite differences with step `h`, used as an independent oracle.
pub fn central_difference<F>(f: F, at: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn pos_pow_derivative(x: f64, p: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        p * x.max(POS_POW_EPS).powf(p - 1.0)
    }
}

fn clip_value(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.value_of(self.idx)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.push(value, &[(self.idx, partial)]),
        }
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        Var {
            tape: self.tape,
            idx: self.tape.push(value, &[(self.idx, da), (other.idx, db)]),
        }
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }

    pub fn tanh(self) -> Var<'t> {
        let y = self.value().tanh();
        self.unary(y, 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = stable_sigmoid(self.value());
        self.unary(s, s * (1.0 - s))
    }

    /// log σ(x), computed as −softplus(−x).
    pub fn log_sigmoid(self) -> Var<'t> {
        let x = self.value();
        self.unary(-stable_softplus(-x), stable_sigmoid(-x))
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        self.unary(stable_softplus(x), stable_sigmoid(x))
    }

    /// max(x, 0).
    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.max(0.0), if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let d = if x > lo && x < hi { 1.0 } else { 0.0 };
        self.unary(clip_value(x, lo, hi), d)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let x = self.value();
        let d = if n == 0 { 0.0 } else { n as f64 * x.powi(n - 1) };
        self.unary(x.powi(n), d)
    }

    /// x^p for a real exponent (x > 0 unless p is integral).
    pub fn powf(self, p: f64) -> Var<'t> {
        let x = self.value();
        self.unary(x.powf(p), p * x.powf(p - 1.0))
    }

    /// max(x, 0)^p with the ε-clamped derivative described in the module docs.
    pub fn pos_pow(self, p: f64) -> Var<'t> {
        let x = self.value();
        self.unary(x.max(0.0).powf(p), pos_pow_derivative(x, p))
    }

    /// A node with caller-supplied value and derivative with respect to `self`.
    /// Used for fused subgraphs whose derivative is known in closed form.
    pub fn fused(self, value: f64, derivative: f64) -> Var<'t> {
        self.unary(value, derivative)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() + rhs.value();
        self.binary(rhs, v, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() - rhs.value();
        self.binary(rhs, v, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, a * b, b, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.unary(v, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        let v = self.value() + rhs;
        self.unary(v, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        let v = self.value() - rhs;
        self.unary(v, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        let v = self.value() * rhs;
        self.unary(v, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        let v = self.value() / rhs;
        self.unary(v, 1.0 / rhs)
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
        let v = self - rhs.value();
        rhs.unary(v, -1.0)
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
        let b = rhs.value();
        rhs.unary(self / b, -self / (b * b))
    }
}

/// Numeric type shared by plain evaluation (`f64`) and taped evaluation
/// ([`Var`]).
pub trait Scalar:
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
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn log_sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn relu(self) -> Self;
    fn clip(self, lo: f64, hi: f64) -> Self;
    fn powi(self, n: i32) -> Self;
    fn pos_pow(self, p: f64) -> Self;
    fn fused(self, value: f64, derivative: f64) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn constant_like(self, c: f64) -> f64 {
        c
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sigmoid(self) -> f64 {
        stable_sigmoid(self)
    }
    fn log_sigmoid(self) -> f64 {
        -stable_softplus(-self)
    }
    fn softplus(self) -> f64 {
        stable_softplus(self)
    }
    fn relu(self) -> f64 {
        self.max(0.0)
    }
    fn clip(self, lo: f64, hi: f64) -> f64 {
        clip_value(self, lo, hi)
    }
    fn powi(self, n: i32) -> f64 {
        f64::powi(self, n)
    }
    fn pos_pow(self, p: f64) -> f64 {
        self.max(0.0).powf(p)
    }
    fn fused(self, value: f64, _derivative: f64) -> f64 {
        value
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        Var::value(&self)
    }
    fn constant_like(self, c: f64) -> Var<'t> {
        self.tape.constant(c)
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
    fn log_sigmoid(self) -> Self {
        Var::log_sigmoid(self)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn clip(self, lo: f64, hi: f64) -> Self {
        Var::clip(self, lo, hi)
    }
    fn powi(self, n: i32) -> Self {
        Var::powi(self, n)
    }
    fn pos_pow(self, p: f64) -> Self {
        Var::pos_pow(self, p)
    }
    fn fused(self, value: f64, derivative: f64) -> Self {
        Var::fused(self, value, derivative)
    }
}
