//! Coefficient functions: deterministic functions of time and the drift perturbation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;

/// Piecewise-linear function through `(t, value)` breakpoints, flat outside the table.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakpointTable<S> {
    knots: Vec<(S, S)>,
}

impl<S: Real> BreakpointTable<S> {
    pub fn new(knots: Vec<(S, S)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidProblem("breakpoint table is empty".into()));
        }
        if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidProblem("breakpoint times must be strictly increasing".into()));
        }
        if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidProblem("breakpoint table contains non-finite entries".into()));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(S, S)] {
        &self.knots
    }

    pub fn eval(&self, t: S) -> S {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        if t >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let i = k.partition_point(|(tk, _)| *tk <= t) - 1;
        let (t0, v0) = k[i];
        let (t1, v1) = k[i + 1];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

/// A deterministic coefficient `f(t)`.
#[derive(Clone)]
pub enum TimeFn<S> {
    Constant(S),
    Table(BreakpointTable<S>),
    /// `scale * exp(rate * t)`
    Exponential { scale: S, rate: S },
    Custom(Arc<dyn Fn(S) -> S + Send + Sync>),
}

impl<S: Real> TimeFn<S> {
    pub fn constant(v: S) -> Self {
        TimeFn::Constant(v)
    }

    pub fn custom(f: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        TimeFn::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: S) -> S {
        match self {
            TimeFn::Constant(v) => *v,
            TimeFn::Table(tab) => tab.eval(t),
            TimeFn::Exponential { scale, rate } => *scale * (*rate * t).exp(),
            TimeFn::Custom(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<S> {
        match self {
            TimeFn::Constant(v) => Some(*v),
            _ => None,
        }
    }
}

impl<S: fmt::Debug> fmt::Debug for TimeFn<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeFn::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            TimeFn::Table(t) => f.debug_tuple("Table").field(t).finish(),
            TimeFn::Exponential { scale, rate } => {
                f.debug_struct("Exponential").field("scale", scale).field("rate", rate).finish()
            }
            TimeFn::Custom(_) => f.write_str("Custom(<fn>)"),
        }
    }
}

/// Nonlinear drift perturbation `r(t, x)`.
#[derive(Clone)]
pub enum Perturbation<S> {
    Zero,
    /// `-x^3`, the inward cubic restoring force.
    NegCubic,
    /// `x^3`; violates the growth conditions and exists for validation tests.
    Cubic,
    /// `c * x`
    Linear(S),
    Custom(Arc<dyn Fn(S, S) -> S + Send + Sync>),
}

impl<S: Real> Perturbation<S> {
    pub fn custom(f: impl Fn(S, S) -> S + Send + Sync + 'static) -> Self {
        Perturbation::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, t: S, x: S) -> S {
        match self {
            Perturbation::Zero => S::zero(),
            Perturbation::NegCubic => -x * x * x,
            Perturbation::Cubic => x * x * x,
            Perturbation::Linear(c) => *c * x,
            Perturbation::Custom(f) => f(t, x),
        }
    }

    /// True when `r(t, -x) = -r(t, x)` is known structurally.
    pub fn is_odd(&self) -> bool {
        !matches!(self, Perturbation::Custom(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Perturbation::Zero)
    }
}

impl<S: fmt::Debug> fmt::Debug for Perturbation<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Zero => f.write_str("Zero"),
            Perturbation::NegCubic => f.write_str("NegCubic"),
            Perturbation::Cubic => f.write_str("Cubic"),
            Perturbation::Linear(c) => f.debug_tuple("Linear").field(c).finish(),
            Perturbation::Custom(_) => f.write_str("Custom(<fn>)"),
        }
    }
}
