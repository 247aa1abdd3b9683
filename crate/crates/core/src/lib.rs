//! Solvers for stochastic linear-quadratic tracking problems whose drift carries a
//! nonlinear perturbation `delta * r(t, x)`.
//!
//! Three independent routes compute the value function and the optimal feedback:
//!
//! * [`lqr`]: Riccati and linear ODEs for the unperturbed problem, plus the closed form of
//!   the constant-coefficient benchmark.
//! * [`hjb`]: Crank–Nicolson finite differences for the quasilinear HJB equation.
//! * [`bsde`]: least-squares regression Monte Carlo for the Markovian BSDE, along either the
//!   drifted or the driftless forward process simulated by [`sde`].
//!
//! [`perturbation`] builds the first-order expansion in `delta` and the convergence study.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the `*64` aliases below fix `f64`.

// `!(a > b)` also rejects NaN, which is what the argument checks want
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod error;
pub mod funcs;
pub mod grid;
pub mod hjb;
pub mod lqr;
pub mod perturbation;
pub mod problem;
pub mod real;
pub mod regression;
pub mod sde;
pub mod tridiag;

pub use error::{Error, Result};
pub use funcs::{BreakpointTable, Perturbation, TimeFn};
pub use grid::{SpaceGrid, TimeGrid};
pub use problem::{validate, Driver, ProblemSpec, ValidationReport};
pub use real::Real;

pub type ProblemSpec64 = problem::ProblemSpec<f64>;
pub type TimeGrid64 = grid::TimeGrid<f64>;
pub type SpaceGrid64 = grid::SpaceGrid<f64>;
pub type LqrSolution64 = lqr::LqrSolution<f64>;
pub type ValueSurface64 = hjb::ValueSurface<f64>;
pub type PathBundle64 = sde::PathBundle<f64>;
pub type BsdeSolution64 = bsde::BsdeSolution<f64>;
pub type ExpansionResult64 = perturbation::ExpansionResult<f64>;

pub type ProblemSpec32 = problem::ProblemSpec<f32>;
pub type ValueSurface32 = hjb::ValueSurface<f32>;
pub type PathBundle32 = sde::PathBundle<f32>;
