//! Unperturbed route: Riccati and linear ODEs for `V(t, x) = P(t) x^2 + K(t) x + N(t)`.
//!
//! With the discount folded into the weights (`l_e = e^{-lambda t} l`, `k_e = e^{-lambda t} k`):
//!
//! ```text
//! P' = -l_e - 2 A P + (B^2 / k_e) P^2,                P(T) = k2
//! K' = -(A - (B^2 / k_e) P) K + 2 l_e xi,              K(T) = -2 k2 xi(T)
//! N' = -sigma^2 P + (B^2 / (4 k_e)) K^2 - l_e xi^2,    N(T) = k2 xi(T)^2
//! ```
//!
//! All three are integrated backward from `T` with classical fixed-step RK4. Off-node values
//! come from cubic Hermite interpolation using the exact ODE slopes at the nodes.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::ProblemSpec;
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct LqrConfig<S> {
    /// Abort when `|P|` exceeds this.
    pub blowup_cap: S,
    /// Negative `P` within this tolerance is clamped to zero.
    pub negativity_tol: S,
}

impl<S: Real> Default for LqrConfig<S> {
    fn default() -> Self {
        Self { blowup_cap: S::lit(1e8), negativity_tol: S::lit(1e-10) }
    }
}

/// Node values of an ODE solution together with the exact slopes at the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct OdePath<S> {
    pub grid: TimeGrid<S>,
    pub values: Vec<S>,
    pub slopes: Vec<S>,
}

impl<S: Real> OdePath<S> {
    /// Cubic Hermite interpolation; `t` is clamped to `[0, T]`.
    pub fn eval(&self, t: S) -> S {
        let t = t.max(S::zero()).min(self.grid.horizon());
        let (i, w) = self.grid.locate(t).expect("clamped time lies in grid");
        hermite(self.grid.step(i), self.values[i], self.values[i + 1], self.slopes[i], self.slopes[i + 1], w)
    }

    pub fn terminal(&self) -> S {
        self.values[self.values.len() - 1]
    }

    pub fn initial(&self) -> S {
        self.values[0]
    }
}

#[inline]
pub(crate) fn hermite<S: Real>(h: S, y0: S, y1: S, d0: S, d1: S, w: S) -> S {
    let two = S::lit(2.0);
    let three = S::lit(3.0);
    let w2 = w * w;
    let w3 = w2 * w;
    let h00 = two * w3 - three * w2 + S::one();
    let h10 = w3 - two * w2 + w;
    let h01 = -two * w3 + three * w2;
    let h11 = w3 - w2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

fn riccati_rhs<S: Real>(spec: &ProblemSpec<S>, t: S, p: S) -> S {
    let b = spec.control_gain.eval(t);
    -spec.state_weight(t) - S::lit(2.0) * spec.drift_linear.eval(t) * p + b * b / spec.control_weight(t) * p * p
}

fn linear_rhs<S: Real>(spec: &ProblemSpec<S>, t: S, p: S, k: S) -> S {
    let b = spec.control_gain.eval(t);
    let a = spec.drift_linear.eval(t);
    -(a - b * b / spec.control_weight(t) * p) * k + S::lit(2.0) * spec.state_weight(t) * spec.target.eval(t)
}

fn constant_rhs<S: Real>(spec: &ProblemSpec<S>, t: S, p: S, k: S) -> S {
    let b = spec.control_gain.eval(t);
    let sigma = spec.diffusion.eval(t);
    let xi = spec.target.eval(t);
    -sigma * sigma * p + b * b / (S::lit(4.0) * spec.control_weight(t)) * k * k - spec.state_weight(t) * xi * xi
}

/// One backward RK4 sweep of `y' = f(t, y)` from `y(T) = terminal`.
fn rk4_backward<S: Real>(
    grid: &TimeGrid<S>,
    terminal: S,
    f: impl Fn(S, S) -> S,
    mut check: impl FnMut(S, S) -> Result<S>,
) -> Result<OdePath<S>> {
    let nodes = grid.nodes();
    let m = grid.steps();
    let mut values = vec![S::zero(); m + 1];
    values[m] = check(nodes[m], terminal)?;
    let half = S::lit(0.5);
    let sixth = S::one() / S::lit(6.0);
    for i in (0..m).rev() {
        let t1 = nodes[i + 1];
        let h = nodes[i] - t1;
        let y1 = values[i + 1];
        let k1 = f(t1, y1);
        let k2 = f(t1 + half * h, y1 + half * h * k1);
        let k3 = f(t1 + half * h, y1 + half * h * k2);
        let k4 = f(nodes[i], y1 + h * k3);
        let y0 = y1 + h * sixth * (k1 + S::lit(2.0) * (k2 + k3) + k4);
        values[i] = check(nodes[i], y0)?;
    }
    let slopes = nodes.iter().zip(&values).map(|(&t, &y)| f(t, y)).collect();
    Ok(OdePath { grid: grid.clone(), values, slopes })
}

fn require_positive_weight<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>) -> Result<()> {
    for &t in grid.nodes() {
        let k = spec.control_weight(t);
        if !(k > S::zero()) {
            return Err(Error::NonPositiveControlWeight { t: t.as_f64(), value: k.as_f64() });
        }
    }
    Ok(())
}

pub fn solve_riccati<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>) -> Result<OdePath<S>> {
    solve_riccati_with(spec, grid, &LqrConfig::default())
}

/// `delta` is ignored: this route solves the unperturbed problem.
pub fn solve_riccati_with<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>, cfg: &LqrConfig<S>) -> Result<OdePath<S>> {
    check_grid_horizon(spec, grid)?;
    require_positive_weight(spec, grid)?;
    let mut clamped = 0usize;
    let path = rk4_backward(
        grid,
        spec.terminal_weight,
        |t, p| riccati_rhs(spec, t, p),
        |t, p| {
            if !p.is_finite() || p.abs() > cfg.blowup_cap {
                return Err(Error::RiccatiBlowUp { t: t.as_f64(), value: p.abs().as_f64(), cap: cfg.blowup_cap.as_f64() });
            }
            if p < S::zero() {
                if p < -cfg.negativity_tol {
                    return Err(Error::NegativeRiccati { t: t.as_f64(), value: p.as_f64() });
                }
                clamped += 1;
                return Ok(S::zero());
            }
            Ok(p)
        },
    )?;
    if clamped > 0 {
        log::warn!("Riccati solution clamped to zero at {clamped} nodes");
    }
    Ok(path)
}

pub fn solve_k<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>, p: &OdePath<S>) -> Result<OdePath<S>> {
    check_same_grid(grid, &p.grid)?;
    let terminal = -S::lit(2.0) * spec.terminal_weight * spec.target.eval(spec.horizon);
    rk4_backward(grid, terminal, |t, k| linear_rhs(spec, t, p.eval(t), k), finite)
}

pub fn solve_n<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>, p: &OdePath<S>, k: &OdePath<S>) -> Result<OdePath<S>> {
    check_same_grid(grid, &p.grid)?;
    check_same_grid(grid, &k.grid)?;
    let xi_t = spec.target.eval(spec.horizon);
    let terminal = spec.terminal_weight * xi_t * xi_t;
    rk4_backward(grid, terminal, |t, _| constant_rhs(spec, t, p.eval(t), k.eval(t)), finite)
}

fn finite<S: Real>(t: S, y: S) -> Result<S> {
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::InvalidProblem(format!("ODE solution not finite at t = {t}")))
    }
}

fn check_same_grid<S: Real>(a: &TimeGrid<S>, b: &TimeGrid<S>) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::InvalidGrid("paths live on different time grids".into()))
    }
}

fn check_grid_horizon<S: Real>(spec: &ProblemSpec<S>, grid: &TimeGrid<S>) -> Result<()> {
    if (grid.horizon() - spec.horizon).abs() > S::lit(1e-12) * spec.horizon.max(S::one()) {
        return Err(Error::InvalidGrid(format!(
            "grid horizon {} differs from problem horizon {}",
            grid.horizon(),
            spec.horizon
        )));
    }
    Ok(())
}

/// Midpoint residuals `(y_{i+1} - y_i)/dt - f(t_mid, (y_i + y_{i+1})/2)` of the Riccati ODE.
pub fn riccati_residuals<S: Real>(spec: &ProblemSpec<S>, p: &OdePath<S>) -> Vec<S> {
    midpoint_residuals(p, |t, y| riccati_rhs(spec, t, y))
}

pub fn linear_residuals<S: Real>(spec: &ProblemSpec<S>, p: &OdePath<S>, k: &OdePath<S>) -> Vec<S> {
    midpoint_residuals(k, |t, y| linear_rhs(spec, t, p.eval(t), y))
}

pub fn constant_residuals<S: Real>(spec: &ProblemSpec<S>, p: &OdePath<S>, k: &OdePath<S>, n: &OdePath<S>) -> Vec<S> {
    midpoint_residuals(n, |t, _| constant_rhs(spec, t, p.eval(t), k.eval(t)))
}

fn midpoint_residuals<S: Real>(path: &OdePath<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    let nodes = path.grid.nodes();
    (0..path.grid.steps())
        .map(|i| {
            let dt = nodes[i + 1] - nodes[i];
            let tm = (nodes[i] + nodes[i + 1]) / S::lit(2.0);
            let ym = (path.values[i] + path.values[i + 1]) / S::lit(2.0);
            (path.values[i + 1] - path.values[i]) / dt - f(tm, ym)
        })
        .collect()
}

/// `a (x - center)^2 + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenteredQuadratic<S> {
    pub curvature: S,
    pub center: S,
    pub offset: S,
}

/// The Riccati triple on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<S> {
    pub p: OdePath<S>,
    pub k: OdePath<S>,
    pub n: OdePath<S>,
}

impl<S: Real> LqrSolution<S> {
    pub fn solve(spec: &ProblemSpec<S>, grid: &TimeGrid<S>) -> Result<Self> {
        Self::solve_with(spec, grid, &LqrConfig::default())
    }

    pub fn solve_with(spec: &ProblemSpec<S>, grid: &TimeGrid<S>, cfg: &LqrConfig<S>) -> Result<Self> {
        let p = solve_riccati_with(spec, grid, cfg)?;
        let k = solve_k(spec, grid, &p)?;
        let n = solve_n(spec, grid, &p, &k)?;
        Ok(Self { p, k, n })
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.p.grid
    }

    /// `V(t, x) = P x^2 + K x + N`.
    pub fn value(&self, t: S, x: S) -> S {
        (self.p.eval(t) * x + self.k.eval(t)) * x + self.n.eval(t)
    }

    pub fn gradient(&self, t: S, x: S) -> S {
        S::lit(2.0) * self.p.eval(t) * x + self.k.eval(t)
    }

    /// `u*(t, x) = -e^{lambda t} B / (2 k) (2 P x + K)`.
    pub fn control(&self, spec: &ProblemSpec<S>, t: S, x: S) -> S {
        spec.optimal_control(t, self.gradient(t, x))
    }

    /// Re-expresses `P x^2 + K x + N` around its vertex. `None` when `P = 0`.
    pub fn centered(&self, t: S) -> Option<CenteredQuadratic<S>> {
        let p = self.p.eval(t);
        if p == S::zero() {
            return None;
        }
        let k = self.k.eval(t);
        Some(CenteredQuadratic {
            curvature: p,
            center: -k / (S::lit(2.0) * p),
            offset: self.n.eval(t) - k * k / (S::lit(4.0) * p),
        })
    }

    /// CSV with header `t,P,K,N`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,P,K,N")?;
        for (i, &t) in self.grid().nodes().iter().enumerate() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                t.as_f64(),
                self.p.values[i].as_f64(),
                self.k.values[i].as_f64(),
                self.n.values[i].as_f64()
            )?;
        }
        Ok(())
    }
}

pub fn lqr_value<S: Real>(sol: &LqrSolution<S>, t: S, x: S) -> S {
    sol.value(t, x)
}

pub fn lqr_control<S: Real>(sol: &LqrSolution<S>, spec: &ProblemSpec<S>, t: S, x: S) -> S {
    sol.control(spec, t, x)
}

/// Closed form of the constant-coefficient unperturbed benchmark
/// (`A = 0`, `l = 1`, no discount, no terminal cost):
///
/// ```text
/// V0(t, x) = tanh(sqrt(C)(T - t)) / sqrt(C) (x - xi)^2 + sigma^2 / C ln cosh(sqrt(C)(T - t))
/// u0(t, x) = -sign(B) / sqrt(k) tanh(|B| / sqrt(k) (T - t)) (x - xi)
/// ```
///
/// with `C = B^2 / k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantExample<S> {
    pub gain: S,
    pub weight: S,
    pub target: S,
    pub sigma: S,
    pub horizon: S,
}

impl<S: Real> ConstantExample<S> {
    pub fn new(gain: S, weight: S, target: S, sigma: S, horizon: S) -> Result<Self> {
        if !(weight > S::zero()) {
            return Err(Error::InvalidArgument(format!("control weight must be positive, got {weight}")));
        }
        if !(gain * gain / weight > S::zero()) {
            return Err(Error::InvalidArgument("C = B^2 / k must be positive".into()));
        }
        if !(horizon > S::zero()) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(Self { gain, weight, target, sigma, horizon })
    }

    /// Builds the benchmark from `C` directly with `B = sqrt(C)`, `k = 1`.
    pub fn from_c(c: S, target: S, sigma: S, horizon: S) -> Result<Self> {
        if !(c > S::zero()) {
            return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
        }
        Self::new(c.sqrt(), S::one(), target, sigma, horizon)
    }

    pub fn c(&self) -> S {
        self.gain * self.gain / self.weight
    }

    /// Curvature `lambda(t) = tanh(sqrt(C)(T - t)) / sqrt(C)`.
    pub fn curvature(&self, t: S) -> S {
        let rc = self.c().sqrt();
        (rc * (self.horizon - t)).tanh() / rc
    }

    /// Offset `gamma(t) = sigma^2 / C ln cosh(sqrt(C)(T - t))`.
    pub fn offset(&self, t: S) -> S {
        let c = self.c();
        self.sigma * self.sigma / c * ln_cosh(c.sqrt() * (self.horizon - t))
    }

    pub fn value(&self, t: S, x: S) -> S {
        let d = x - self.target;
        self.curvature(t) * d * d + self.offset(t)
    }

    pub fn gradient(&self, t: S, x: S) -> S {
        S::lit(2.0) * self.curvature(t) * (x - self.target)
    }

    pub fn control(&self, t: S, x: S) -> S {
        let rk = self.weight.sqrt();
        let sign = if self.gain < S::zero() { -S::one() } else { S::one() };
        -sign / rk * (self.gain.abs() / rk * (self.horizon - t)).tanh() * (x - self.target)
    }

    /// `(V0, u0)` at `(t, x)`.
    pub fn evaluate(&self, t: S, x: S) -> (S, S) {
        (self.value(t, x), self.control(t, x))
    }

    /// The matching [`ProblemSpec`] with perturbation strength `delta` and `r = -x^3`.
    pub fn problem(&self, delta: S, x0: S) -> Result<ProblemSpec<S>> {
        let spec = ProblemSpec::cubic_example(self.gain, self.weight, self.sigma, self.target, delta)?;
        Ok(ProblemSpec { horizon: self.horizon, x0, ..spec })
    }
}

/// `ln cosh(y)` without overflow for large `|y|`.
pub fn ln_cosh<S: Real>(y: S) -> S {
    let a = y.abs();
    a + (-S::lit(2.0) * a).exp().ln_1p() - S::LN_2()
}
