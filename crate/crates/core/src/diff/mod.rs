//! Reverse-mode differentiation over a scalar tape.
//!
//! Numerical code in this crate is written once against the [`Real`] trait
//! and runs either on plain `f64` or on [`Var`], which records every
//! operation onto a [`Tape`]. Constants (`Var::from(f64)`) carry no tape and
//! cost nothing to record. A tape lives for one forward/backward region and
//! is dropped afterwards.

mod checkpoint;

pub use checkpoint::{checkpointed_grad, whole_tape_grad, CheckpointStats, MapGrad, SegmentedMap};

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Operation kind recorded for each tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    ExpM1,
    Ln,
    Sqrt,
    Tanh,
    Silu,
    Sin,
    Cos,
    Powf,
    Clamp,
    Sum,
    Dot,
    LogSumExp,
    Norm,
}

/// Scalar arithmetic shared by `f64` and taped [`Var`]s.
pub trait Real:
    Copy
    + fmt::Debug
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn exp_m1(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// `x * sigmoid(x)`
    fn silu(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powf(self, p: f64) -> Self;
    /// Clamp into `[lo, hi]`; the derivative is 1 inside the closed interval.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
    fn sum(xs: &[Self]) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;
    fn log_sum_exp(xs: &[Self]) -> Self;
    /// Euclidean norm. At the origin the derivative is taken as zero.
    fn norm(xs: &[Self]) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

/// Value kernels. `Var` uses these too, so taped and untaped runs produce
/// bit-identical values.
mod kernels {
    pub fn sum(xs: impl Iterator<Item = f64>) -> f64 {
        xs.fold(0.0, |acc, x| acc + x)
    }

    pub fn dot(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
        a.zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
    }

    pub fn max(xs: impl Iterator<Item = f64>) -> f64 {
        xs.fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn log_sum_exp(xs: &[f64]) -> f64 {
        let m = max(xs.iter().copied());
        if !m.is_finite() {
            return m;
        }
        m + sum(xs.iter().map(|x| (x - m).exp())).ln()
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn norm(xs: impl Iterator<Item = f64>) -> f64 {
        sum(xs.map(|x| x * x)).sqrt()
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn silu(self) -> Self {
        self * kernels::sigmoid(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
    fn sum(xs: &[Self]) -> Self {
        kernels::sum(xs.iter().copied())
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::dot(a.iter().copied(), b.iter().copied())
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        kernels::log_sum_exp(xs)
    }
    fn norm(xs: &[Self]) -> Self {
        kernels::norm(xs.iter().copied())
    }
}

#[derive(Default)]
struct Inner {
    ops: Vec<Op>,
    vals: Vec<f64>,
    /// `edges[starts[i]..starts[i + 1]]` are node `i`'s (parent, partial) pairs.
    starts: Vec<u32>,
    edges: Vec<(u32, f64)>,
}

/// Append-only record of a forward computation.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                starts: vec![0],
                ..Default::default()
            }),
        }
    }

    /// New leaf variable.
    pub fn var(&self, v: f64) -> Var<'_> {
        self.push(Op::Leaf, v, &[])
    }

    pub fn vars(&self, vs: &[f64]) -> Vec<Var<'_>> {
        vs.iter().map(|&v| self.var(v)).collect()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, val: f64, edges: &[(u32, f64)]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.ops.len() as u32;
        inner.ops.push(op);
        inner.vals.push(val);
        inner.edges.extend_from_slice(edges);
        let end = inner.edges.len() as u32;
        inner.starts.push(end);
        Var {
            tape: Some(self),
            idx,
            val,
        }
    }

    /// Propagates the given output adjoints back to every node.
    ///
    /// The tape is left intact, so several backward passes with different
    /// seeds can share one forward recording.
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Result<Adjoints> {
        let inner = self.inner.borrow();
        let n = inner.ops.len();
        let mut adj = vec![0.0; n];
        for (v, s) in seeds {
            if let Some(t) = v.tape {
                debug_assert!(std::ptr::eq(t, self), "seed recorded on another tape");
                adj[v.idx as usize] += s;
            }
        }
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let op = inner.ops[i];
            if !a.is_finite() || !inner.vals[i].is_finite() {
                return Err(Error::Gradient { index: i, op });
            }
            let (lo, hi) = (inner.starts[i] as usize, inner.starts[i + 1] as usize);
            for &(p, w) in &inner.edges[lo..hi] {
                if !w.is_finite() {
                    return Err(Error::Gradient { index: i, op });
                }
                adj[p as usize] += a * w;
            }
        }
        Ok(Adjoints { adj })
    }
}

/// Adjoints of every node after a backward pass.
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adj[v.idx as usize],
            None => 0.0,
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(v)).collect()
    }
}

/// Gradients of a scalar `loss` with respect to each group of leaves.
pub fn grad(loss: Var<'_>, groups: &[&[Var<'_>]]) -> Result<Vec<Vec<f64>>> {
    let Some(tape) = loss.tape else {
        return Ok(groups.iter().map(|g| vec![0.0; g.len()]).collect());
    };
    let adj = tape.backward(&[(loss, 1.0)])?;
    Ok(groups.iter().map(|g| adj.wrt_all(g)).collect())
}

/// A value that may be recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var#{}({})", self.idx, self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl From<f64> for Var<'_> {
    fn from(val: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val,
        }
    }
}

impl<'t> Var<'t> {
    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, op: Op, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::from(val),
            Some(t) => t.push(op, val, &[(self.idx, d)]),
        }
    }

    fn binary(self, rhs: Self, op: Op, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, rhs.tape) {
            (None, None) => Var::from(val),
            (Some(t), None) => t.push(op, val, &[(self.idx, da)]),
            (None, Some(t)) => t.push(op, val, &[(rhs.idx, db)]),
            (Some(t), Some(_)) => t.push(op, val, &[(self.idx, da), (rhs.idx, db)]),
        }
    }

    fn nary(xs: &[Self], op: Op, val: f64, partial: impl Fn(usize) -> f64) -> Self {
        let Some(tape) = xs.iter().find_map(|x| x.tape) else {
            return Var::from(val);
        };
        let edges: Vec<(u32, f64)> = xs
            .iter()
            .enumerate()
            .filter(|(_, x)| x.tape.is_some())
            .map(|(i, x)| (x.idx, partial(i)))
            .collect();
        tape.push(op, val, &edges)
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, Op::Div, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.val, -1.0)
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(Op::Exp, e, e)
    }
    fn exp_m1(self) -> Self {
        self.unary(Op::ExpM1, self.val.exp_m1(), self.val.exp())
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(Op::Sqrt, s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let y = self.val.tanh();
        self.unary(Op::Tanh, y, 1.0 - y * y)
    }
    fn silu(self) -> Self {
        let x = self.val;
        let s = kernels::sigmoid(x);
        self.unary(Op::Silu, x * s, s + x * s * (1.0 - s))
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin, self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, self.val.cos(), -self.val.sin())
    }
    fn powf(self, p: f64) -> Self {
        self.unary(Op::Powf, self.val.powf(p), p * self.val.powf(p - 1.0))
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        let inside = self.val >= lo && self.val <= hi;
        self.unary(
            Op::Clamp,
            self.val.clamp(lo, hi),
            if inside { 1.0 } else { 0.0 },
        )
    }
    fn sum(xs: &[Self]) -> Self {
        let val = kernels::sum(xs.iter().map(|x| x.val));
        Var::nary(xs, Op::Sum, val, |_| 1.0)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot of unequal lengths");
        let val = kernels::dot(a.iter().map(|x| x.val), b.iter().map(|x| x.val));
        let both: Vec<Var<'_>> = a.iter().chain(b).copied().collect();
        let n = a.len();
        Var::nary(&both, Op::Dot, val, |i| if i < n { b[i].val } else { a[i - n].val })
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        let vals: Vec<f64> = xs.iter().map(|x| x.val).collect();
        let val = kernels::log_sum_exp(&vals);
        Var::nary(xs, Op::LogSumExp, val, |i| (vals[i] - val).exp())
    }
    fn norm(xs: &[Self]) -> Self {
        let val = kernels::norm(xs.iter().map(|x| x.val));
        let denom = if val == 0.0 { 1e-30 } else { val };
        Var::nary(xs, Op::Norm, val, |i| xs[i].val / denom)
    }
}
