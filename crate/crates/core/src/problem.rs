//! Problem definition: coefficients, drift, BSDE drivers and the probing validator.
//!
//! The controlled state is
//!
//! ```text
//! dX = [A(t) X + delta r(t, X) + B(t) u] dt + sigma(t) dW
//! ```
//!
//! with running cost `e^{-lambda t} [ l(t) (X - xi(t))^2 + k(t) u^2 ]` and terminal cost
//! `k2 (X_T - xi(T))^2`. The discount is folded into effective weights
//! ([`ProblemSpec::state_weight`], [`ProblemSpec::control_weight`]) so every route works
//! with the same undiscounted formulas.

use std::fmt;

use crate::error::{Error, Result};
use crate::funcs::{Perturbation, TimeFn};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct ProblemSpec<S> {
    /// `A(t)`, linear drift coefficient.
    pub drift_linear: TimeFn<S>,
    /// `B(t)`, control gain.
    pub control_gain: TimeFn<S>,
    /// `k(t)`, control-cost weight before discounting.
    pub control_cost: TimeFn<S>,
    /// `l(t)`, state-cost weight before discounting.
    pub state_cost: TimeFn<S>,
    pub diffusion: TimeFn<S>,
    /// Tracking target `xi(t)`.
    pub target: TimeFn<S>,
    pub discount_rate: S,
    pub terminal_weight: S,
    pub delta: S,
    pub perturbation: Perturbation<S>,
    pub horizon: S,
    pub x0: S,
}

impl<S: Real> ProblemSpec<S> {
    /// Builder preloaded with the constant benchmark: `A = 0`, `B = k = l = sigma = 1`,
    /// `xi = 0`, no discount, no terminal cost, `delta = 0`, `T = 1`, `x0 = 1`.
    pub fn builder() -> ProblemBuilder<S> {
        ProblemBuilder::default()
    }

    /// Constant-coefficient cubic example: `dX = (-delta X^3 + B u) dt + sigma dW`,
    /// running cost `(X - xi)^2 + k u^2` on `[0, 1]`.
    pub fn cubic_example(b: S, k: S, sigma: S, xi: S, delta: S) -> Result<Self> {
        Self::builder()
            .control_gain(TimeFn::Constant(b))
            .control_cost(TimeFn::Constant(k))
            .diffusion(TimeFn::Constant(sigma))
            .target(TimeFn::Constant(xi))
            .delta(delta)
            .perturbation(Perturbation::NegCubic)
            .build()
    }

    pub fn with_delta(&self, delta: S) -> Self {
        Self { delta, ..self.clone() }
    }

    pub fn with_x0(&self, x0: S) -> Self {
        Self { x0, ..self.clone() }
    }

    #[inline]
    fn discount(&self, t: S) -> S {
        if self.discount_rate == S::zero() {
            S::one()
        } else {
            (-self.discount_rate * t).exp()
        }
    }

    /// `mu(t, x) = A(t) x + delta r(t, x)`.
    #[inline]
    pub fn drift(&self, t: S, x: S) -> S {
        let linear = self.drift_linear.eval(t) * x;
        if self.delta == S::zero() {
            linear
        } else {
            linear + self.delta * self.perturbation.eval(t, x)
        }
    }

    /// Discounted state weight `e^{-lambda t} l(t)`.
    #[inline]
    pub fn state_weight(&self, t: S) -> S {
        self.discount(t) * self.state_cost.eval(t)
    }

    /// Discounted control weight `e^{-lambda t} k(t)`.
    #[inline]
    pub fn control_weight(&self, t: S) -> S {
        self.discount(t) * self.control_cost.eval(t)
    }

    /// Running state cost `e^{-lambda t} l(t) (x - xi(t))^2`.
    #[inline]
    pub fn running_cost(&self, t: S, x: S) -> S {
        let d = x - self.target.eval(t);
        self.state_weight(t) * d * d
    }

    /// `H(t) = B^2 / (2 k sigma^2)` with the discounted control weight.
    #[inline]
    pub fn h_ratio(&self, t: S) -> S {
        let b = self.control_gain.eval(t);
        let s = self.diffusion.eval(t);
        b * b / (S::lit(2.0) * self.control_weight(t) * s * s)
    }

    /// Coefficient `q(t) = B^2 / (4 k)` of the `-q V_x^2` term in the HJB equation.
    #[inline]
    pub fn gradient_penalty(&self, t: S) -> S {
        let b = self.control_gain.eval(t);
        b * b / (S::lit(4.0) * self.control_weight(t))
    }

    /// Minimizer of `k u^2 + B u p` over `u`: `-B p / (2 k)`.
    #[inline]
    pub fn optimal_control(&self, t: S, p: S) -> S {
        -self.control_gain.eval(t) * p / (S::lit(2.0) * self.control_weight(t))
    }

    /// `k u^2 + B u p`, the control-dependent part of the Hamiltonian.
    #[inline]
    pub fn control_hamiltonian(&self, t: S, u: S, p: S) -> S {
        self.control_weight(t) * u * u + self.control_gain.eval(t) * u * p
    }

    /// `F(t, x, z) = l (x - xi)^2 - H z^2 / 2`.
    #[inline]
    pub fn driver_f(&self, t: S, x: S, z: S) -> S {
        self.running_cost(t, x) - self.h_ratio(t) * z * z / S::lit(2.0)
    }

    /// `F_hat(t, x, z) = F(t, x, z) + mu(t, x) z / sigma(t)`, the driver along the driftless
    /// forward process.
    #[inline]
    pub fn driver_f_hat(&self, t: S, x: S, z: S) -> S {
        self.driver_f(t, x, z) + self.drift(t, x) / self.diffusion.eval(t) * z
    }

    #[inline]
    pub fn terminal_cost(&self, x: S) -> S {
        let d = x - self.target.eval(self.horizon);
        self.terminal_weight * d * d
    }

    #[inline]
    pub fn terminal_cost_derivative(&self, x: S) -> S {
        S::lit(2.0) * self.terminal_weight * (x - self.target.eval(self.horizon))
    }

    /// `F` as a BSDE driver along the drifted forward process.
    pub fn driver(&self) -> ProblemDriver<'_, S> {
        ProblemDriver { spec: self, shifted: false }
    }

    /// `F_hat` as a BSDE driver along the driftless forward process.
    pub fn shifted_driver(&self) -> ProblemDriver<'_, S> {
        ProblemDriver { spec: self, shifted: true }
    }
}

/// Generator `F(t, x, z)` of a Markovian BSDE `dY = -F dt + Z dW`.
pub trait Driver<S>: Sync {
    fn eval(&self, t: S, x: S, z: S) -> S;
}

impl<S, F> Driver<S> for F
where
    F: Fn(S, S, S) -> S + Sync,
{
    #[inline]
    fn eval(&self, t: S, x: S, z: S) -> S {
        self(t, x, z)
    }
}

/// Driver bound to a [`ProblemSpec`]; `F` or, when `shifted`, `F_hat`.
#[derive(Clone, Copy)]
pub struct ProblemDriver<'a, S> {
    spec: &'a ProblemSpec<S>,
    shifted: bool,
}

impl<S: Real> ProblemDriver<'_, S> {
    pub fn is_shifted(&self) -> bool {
        self.shifted
    }
}

impl<S: Real> Driver<S> for ProblemDriver<'_, S> {
    #[inline]
    fn eval(&self, t: S, x: S, z: S) -> S {
        if self.shifted {
            self.spec.driver_f_hat(t, x, z)
        } else {
            self.spec.driver_f(t, x, z)
        }
    }
}

pub struct ProblemBuilder<S> {
    spec: ProblemSpec<S>,
}

impl<S: Real> Default for ProblemBuilder<S> {
    fn default() -> Self {
        Self {
            spec: ProblemSpec {
                drift_linear: TimeFn::Constant(S::zero()),
                control_gain: TimeFn::Constant(S::one()),
                control_cost: TimeFn::Constant(S::one()),
                state_cost: TimeFn::Constant(S::one()),
                diffusion: TimeFn::Constant(S::one()),
                target: TimeFn::Constant(S::zero()),
                discount_rate: S::zero(),
                terminal_weight: S::zero(),
                delta: S::zero(),
                perturbation: Perturbation::Zero,
                horizon: S::one(),
                x0: S::one(),
            },
        }
    }
}

macro_rules! setter {
    ($name:ident, $ty:ty) => {
        pub fn $name(mut self, v: $ty) -> Self {
            self.spec.$name = v;
            self
        }
    };
}

impl<S: Real> ProblemBuilder<S> {
    setter!(drift_linear, TimeFn<S>);
    setter!(control_gain, TimeFn<S>);
    setter!(control_cost, TimeFn<S>);
    setter!(state_cost, TimeFn<S>);
    setter!(diffusion, TimeFn<S>);
    setter!(target, TimeFn<S>);
    setter!(discount_rate, S);
    setter!(terminal_weight, S);
    setter!(delta, S);
    setter!(perturbation, Perturbation<S>);
    setter!(horizon, S);
    setter!(x0, S);

    /// Checks scalar fields only; Condition-style checks on the coefficient functions
    /// belong to [`validate`].
    pub fn build(self) -> Result<ProblemSpec<S>> {
        let s = self.spec;
        if !(s.horizon > S::zero()) || !s.horizon.is_finite() {
            return Err(Error::InvalidProblem(format!("horizon must be positive, got {}", s.horizon)));
        }
        if !(s.discount_rate >= S::zero()) || !s.discount_rate.is_finite() {
            return Err(Error::InvalidProblem("discount rate must be finite and >= 0".into()));
        }
        if !(s.terminal_weight >= S::zero()) || !s.terminal_weight.is_finite() {
            return Err(Error::InvalidProblem("terminal weight must be finite and >= 0".into()));
        }
        if !s.delta.is_finite() || !s.x0.is_finite() {
            return Err(Error::InvalidProblem("delta and x0 must be finite".into()));
        }
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Clause {
    /// Continuity of one coefficient function.
    Continuity(Coefficient),
    /// `k(t) > epsilon > 0`.
    ControlWeightPositive,
    /// `l(t) >= 0`.
    StateWeightNonNegative,
    /// `|sigma(t)| > delta_0 > 0`.
    DiffusionNonDegenerate,
    /// `H(t)` bounded away from zero.
    HRatioPositive,
    /// `|H'(t) / H(t)|` bounded.
    HRatioLogDerivativeBounded,
    /// `x r(t, x) <= C (1 + x^2)`.
    OneSidedGrowth,
    /// `(x - y)(r(t, x) - r(t, y)) <= K (x - y)^2`.
    OneSidedLipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coefficient {
    DriftLinear,
    ControlGain,
    ControlCost,
    StateCost,
    Diffusion,
    Target,
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clause::Continuity(c) => write!(f, "continuity({c:?})"),
            Clause::ControlWeightPositive => f.write_str("control_weight_positive"),
            Clause::StateWeightNonNegative => f.write_str("state_weight_nonnegative"),
            Clause::DiffusionNonDegenerate => f.write_str("diffusion_nondegenerate"),
            Clause::HRatioPositive => f.write_str("h_ratio_positive"),
            Clause::HRatioLogDerivativeBounded => f.write_str("h_ratio_log_derivative_bounded"),
            Clause::OneSidedGrowth => f.write_str("one_sided_growth"),
            Clause::OneSidedLipschitz => f.write_str("one_sided_lipschitz"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClauseReport<S> {
    pub clause: Clause,
    pub passed: bool,
    /// Probe point `(t, x)` where the clause failed (`x` is `None` for time-only clauses).
    pub witness: Option<(S, Option<S>)>,
    pub detail: String,
}

/// Constants observed on the probe lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedConstants<S> {
    /// `min k(t)` (discounted).
    pub epsilon: S,
    /// `max x r / (1 + x^2)`, floored at 0.
    pub growth_c: S,
    /// `max (x - y)(r(x) - r(y)) / (x - y)^2`, floored at 0.
    pub lipschitz_k: S,
    pub sigma_min: S,
    pub sigma_max: S,
    pub drift_linear_max: S,
    pub control_gain_max: S,
    pub h_min: S,
    pub h_log_derivative_max: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport<S> {
    pub probe_density: usize,
    pub probe_x_max: S,
    pub clauses: Vec<ClauseReport<S>>,
    pub constants: ObservedConstants<S>,
}

impl<S: Real> ValidationReport<S> {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn clause(&self, clause: Clause) -> Option<&ClauseReport<S>> {
        self.clauses.iter().find(|c| c.clause == clause)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ClauseReport<S>> {
        self.clauses.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationConfig<S> {
    /// Points per axis of the probe lattice.
    pub probe_density: usize,
    /// Probe lattice spans `[-x_max, x_max]`.
    pub x_max: S,
    /// Sup over the full window may exceed `growth_factor * max(1, sup over the half window)`
    /// before the clause is declared unbounded.
    pub growth_factor: S,
}

impl<S: Real> ValidationConfig<S> {
    pub fn new(probe_density: usize) -> Self {
        Self { probe_density, x_max: S::lit(50.0), growth_factor: S::lit(1.5) }
    }
}

pub fn validate<S: Real>(spec: &ProblemSpec<S>, probe_density: usize) -> Result<ValidationReport<S>> {
    validate_with(spec, &ValidationConfig::new(probe_density))
}

/// Probes every clause of the well-posedness conditions.
///
/// Conditions on `r` cannot be checked symbolically, so the one-sided growth and Lipschitz
/// constants are measured on the lattice twice: on the full window and on its inner half.
/// A bounded ratio keeps both sups comparable; a super-quadratic `x r` roughly quadruples.
pub fn validate_with<S: Real>(spec: &ProblemSpec<S>, cfg: &ValidationConfig<S>) -> Result<ValidationReport<S>> {
    let d = cfg.probe_density;
    if d < 2 {
        return Err(Error::InvalidArgument("probe density must be at least 2".into()));
    }
    if !(cfg.x_max > S::zero()) {
        return Err(Error::InvalidArgument("probe window must be positive".into()));
    }
    let horizon = spec.horizon;
    let dense = 64 * d;
    let times: Vec<S> = (0..=dense).map(|i| horizon * S::from_count(i) / S::from_count(dense)).collect();

    for &t in &times {
        let k = spec.control_weight(t);
        if !(k > S::zero()) {
            return Err(Error::NonPositiveControlWeight { t: t.as_f64(), value: k.as_f64() });
        }
        if spec.diffusion.eval(t) == S::zero() {
            return Err(Error::DegenerateDiffusion { t: t.as_f64() });
        }
    }

    let mut clauses = Vec::new();

    let coefficient_fns: [(Coefficient, &TimeFn<S>); 6] = [
        (Coefficient::DriftLinear, &spec.drift_linear),
        (Coefficient::ControlGain, &spec.control_gain),
        (Coefficient::ControlCost, &spec.control_cost),
        (Coefficient::StateCost, &spec.state_cost),
        (Coefficient::Diffusion, &spec.diffusion),
        (Coefficient::Target, &spec.target),
    ];
    for (which, f) in coefficient_fns {
        clauses.push(continuity_clause(which, |t| f.eval(t), horizon, dense));
    }

    let fold = |f: &dyn Fn(S) -> S| -> (S, S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        let mut at = S::zero();
        for &t in &times {
            let v = f(t);
            if v < lo {
                lo = v;
                at = t;
            }
            hi = hi.max(v);
        }
        (lo, hi, at)
    };

    let (epsilon, _, _) = fold(&|t| spec.control_weight(t));
    clauses.push(ClauseReport {
        clause: Clause::ControlWeightPositive,
        passed: true,
        witness: None,
        detail: format!("min k = {epsilon}"),
    });

    let (l_min, _, l_at) = fold(&|t| spec.state_cost.eval(t));
    clauses.push(ClauseReport {
        clause: Clause::StateWeightNonNegative,
        passed: l_min >= S::zero(),
        witness: (l_min < S::zero()).then_some((l_at, None)),
        detail: format!("min l = {l_min}"),
    });

    let (sigma_min, _, _) = fold(&|t| spec.diffusion.eval(t).abs());
    let (_, sigma_max, _) = fold(&|t| spec.diffusion.eval(t).abs());
    clauses.push(ClauseReport {
        clause: Clause::DiffusionNonDegenerate,
        passed: sigma_min > S::zero(),
        witness: None,
        detail: format!("min |sigma| = {sigma_min}"),
    });

    let (_, drift_linear_max, _) = fold(&|t| spec.drift_linear.eval(t));
    let (_, control_gain_max, _) = fold(&|t| spec.control_gain.eval(t).abs());

    let (h_min, _, h_at) = fold(&|t| spec.h_ratio(t));
    clauses.push(ClauseReport {
        clause: Clause::HRatioPositive,
        passed: h_min > S::zero(),
        witness: (!(h_min > S::zero())).then_some((h_at, None)),
        detail: format!("min H = {h_min}"),
    });

    let (h_log_derivative_max, log_ok, log_at) = h_log_derivative(spec, dense, cfg.growth_factor);
    clauses.push(ClauseReport {
        clause: Clause::HRatioLogDerivativeBounded,
        passed: log_ok,
        witness: (!log_ok).then_some((log_at, None)),
        detail: format!("max |H'/H| = {h_log_derivative_max}"),
    });

    let probe_t: Vec<S> = (0..d).map(|i| horizon * S::from_count(i) / S::from_count(d - 1)).collect();
    let probe_x: Vec<S> = (0..=2 * d)
        .map(|i| -cfg.x_max + cfg.x_max * S::from_count(i) / S::from_count(d))
        .collect();
    let half = cfg.x_max / S::lit(2.0);
    let in_half = |x: S| x.abs() <= half * (S::one() + S::lit(1e-12));

    // One-sided growth.
    let mut growth_full = (S::neg_infinity(), S::zero(), S::zero());
    let mut growth_half = S::neg_infinity();
    for &t in &probe_t {
        for &x in &probe_x {
            let v = x * spec.perturbation.eval(t, x) / (S::one() + x * x);
            if !v.is_finite() {
                return Err(Error::InvalidProblem(format!("r(t, x) not finite at t = {t}, x = {x}")));
            }
            if v > growth_full.0 {
                growth_full = (v, t, x);
            }
            if in_half(x) {
                growth_half = growth_half.max(v);
            }
        }
    }
    let growth_ok = growth_full.0 <= cfg.growth_factor * growth_half.max(S::one());
    clauses.push(ClauseReport {
        clause: Clause::OneSidedGrowth,
        passed: growth_ok,
        witness: (!growth_ok).then_some((growth_full.1, Some(growth_full.2))),
        detail: format!("sup x r/(1+x^2) = {} (inner half: {growth_half})", growth_full.0),
    });

    // One-sided Lipschitz.
    let mut lip_full = (S::neg_infinity(), S::zero(), S::zero());
    let mut lip_half = S::neg_infinity();
    for &t in &probe_t {
        let r: Vec<S> = probe_x.iter().map(|&x| spec.perturbation.eval(t, x)).collect();
        for i in 0..probe_x.len() {
            for j in (i + 1)..probe_x.len() {
                let dx = probe_x[i] - probe_x[j];
                let v = (r[i] - r[j]) / dx;
                if v > lip_full.0 {
                    lip_full = (v, t, probe_x[i]);
                }
                if in_half(probe_x[i]) && in_half(probe_x[j]) {
                    lip_half = lip_half.max(v);
                }
            }
        }
    }
    let lip_ok = lip_full.0 <= cfg.growth_factor * lip_half.max(S::one());
    clauses.push(ClauseReport {
        clause: Clause::OneSidedLipschitz,
        passed: lip_ok,
        witness: (!lip_ok).then_some((lip_full.1, Some(lip_full.2))),
        detail: format!("sup (x-y)(r(x)-r(y))/(x-y)^2 = {} (inner half: {lip_half})", lip_full.0),
    });

    Ok(ValidationReport {
        probe_density: d,
        probe_x_max: cfg.x_max,
        clauses,
        constants: ObservedConstants {
            epsilon,
            growth_c: growth_full.0.max(S::zero()),
            lipschitz_k: lip_full.0.max(S::zero()),
            sigma_min,
            sigma_max,
            drift_linear_max,
            control_gain_max,
            h_min,
            h_log_derivative_max,
        },
    })
}

/// A continuous function's largest neighbour jump shrinks when the sampling doubles; a jump
/// discontinuity keeps it.
fn continuity_clause<S: Real>(which: Coefficient, f: impl Fn(S) -> S, horizon: S, n: usize) -> ClauseReport<S> {
    let max_jump = |n: usize| -> (S, S) {
        let mut best = (S::zero(), S::zero());
        let mut prev = f(S::zero());
        for i in 1..=n {
            let t = horizon * S::from_count(i) / S::from_count(n);
            let v = f(t);
            let jump = (v - prev).abs();
            if jump > best.0 || !jump.is_finite() {
                best = (jump, t);
            }
            prev = v;
        }
        best
    };
    let (coarse, _) = max_jump(n);
    let (fine, at) = max_jump(2 * n);
    let scale = f(S::zero()).abs().max(S::one());
    let ok = fine.is_finite() && fine <= S::lit(0.75) * coarse + S::lit(1e-9) * scale;
    ClauseReport {
        clause: Clause::Continuity(which),
        passed: ok,
        witness: (!ok).then_some((at, None)),
        detail: format!("max neighbour jump {fine} at spacing T/{}", 2 * n),
    }
}

fn h_log_derivative<S: Real>(spec: &ProblemSpec<S>, n: usize, factor: S) -> (S, bool, S) {
    let sweep = |n: usize| -> (S, S) {
        let dt = spec.horizon / S::from_count(n);
        let mut best = (S::zero(), S::zero());
        for i in 0..n {
            let t0 = dt * S::from_count(i);
            let t1 = t0 + dt;
            let h0 = spec.h_ratio(t0);
            let h1 = spec.h_ratio(t1);
            let v = ((h1 - h0) / dt / ((h0 + h1) / S::lit(2.0))).abs();
            if !(v <= best.0) {
                best = (v, t0);
            }
        }
        best
    };
    let (coarse, _) = sweep(n);
    let (fine, at) = sweep(2 * n);
    let ok = fine.is_finite() && fine <= factor * coarse.max(S::one());
    (fine, ok, at)
}
