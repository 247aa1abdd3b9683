//! Finite-difference solver for the quasilinear HJB equation
//!
//! ```text
//! V_t + sigma^2 / 2 V_xx + mu(t, x) V_x + l_e (x - xi)^2 - q V_x^2 = 0,   V(T, x) = g(x),
//! ```
//!
//! with `mu = A x + delta r`, `q = B^2 / (4 k_e)` and `g(x) = k2 (x - xi(T))^2`.
//!
//! Time stepping is Crank–Nicolson, backward from `T`. At the new time level the quadratic
//! term is linearized as `-q G V_x` with `G` the lagged gradient, then refined by a few
//! Picard passes that replace `G` with the gradient of the latest iterate. Every pass is a
//! single tridiagonal solve. The drift uses centered differences while the cell Péclet number
//! `|mu| h / (sigma^2 / 2)` stays at or below 2 and switches to upwinding beyond. Both edges
//! carry `V_xx = 0`, eliminated into the first and last interior rows.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::problem::ProblemSpec;
use crate::real::Real;
use crate::tridiag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig<S> {
    /// Implicitness; `0.5` is Crank–Nicolson, `1` is backward Euler.
    pub theta: S,
    /// Picard corrector passes after the lagged-gradient predictor.
    pub picard_iterations: usize,
    /// A step stops iterating once the sup correction falls below this.
    pub picard_tol: S,
}

impl<S: Real> Default for SchemeConfig<S> {
    fn default() -> Self {
        Self { theta: S::lit(0.5), picard_iterations: 2, picard_tol: S::lit(1e-10) }
    }
}

impl<S: Real> SchemeConfig<S> {
    fn check(&self) -> Result<()> {
        if !(self.theta >= S::lit(0.5) && self.theta <= S::one()) {
            return Err(Error::InvalidArgument(format!("theta must lie in [0.5, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Diagnostics recorded while solving.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMeta<S> {
    pub scheme: String,
    pub theta: S,
    pub picard_iterations: usize,
    /// Largest final Picard correction over all steps.
    pub max_picard_correction: S,
    /// Steps whose final correction stayed above the tolerance.
    pub unconverged_steps: usize,
    /// Node-steps where the drift was upwinded.
    pub upwind_nodes: usize,
    /// `max |velocity| dt / h` over the run.
    pub max_courant: S,
    /// Node-steps whose second differences alternate in sign (sawtooth).
    pub oscillating_nodes: usize,
    pub boundary: String,
}

impl<S: Real> SurfaceMeta<S> {
    fn injected(label: &str) -> Self {
        Self {
            scheme: label.to_string(),
            theta: S::lit(0.5),
            picard_iterations: 0,
            max_picard_correction: S::zero(),
            unconverged_steps: 0,
            upwind_nodes: 0,
            max_courant: S::zero(),
            oscillating_nodes: 0,
            boundary: "none".into(),
        }
    }
}

/// `V` and `V_x` on a time-space grid, row-major in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface<S> {
    tgrid: TimeGrid<S>,
    xgrid: SpaceGrid<S>,
    values: Vec<S>,
    gradients: Vec<S>,
    pub meta: SurfaceMeta<S>,
}

impl<S: Real> ValueSurface<S> {
    /// Builds a surface from node values; gradients use the solver's stencils.
    pub fn from_values(tgrid: TimeGrid<S>, xgrid: SpaceGrid<S>, values: Vec<S>, meta: SurfaceMeta<S>) -> Result<Self> {
        let nx = xgrid.len();
        if values.len() != tgrid.len() * nx {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                tgrid.len() * nx,
                values.len()
            )));
        }
        let h = xgrid.spacing();
        let mut gradients = vec![S::zero(); values.len()];
        for (row, grad) in values.chunks(nx).zip(gradients.chunks_mut(nx)) {
            gradient_into(row, h, grad);
        }
        Ok(Self { tgrid, xgrid, values, gradients, meta })
    }

    /// Samples `f(t, x)` at every node.
    pub fn from_fn(tgrid: TimeGrid<S>, xgrid: SpaceGrid<S>, f: impl Fn(S, S) -> S) -> Self {
        let xs = xgrid.nodes();
        let values = tgrid.nodes().iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).map(|(t, x)| f(t, x)).collect();
        Self::from_values(tgrid, xgrid, values, SurfaceMeta::injected("sampled")).expect("sizes match")
    }

    pub fn tgrid(&self) -> &TimeGrid<S> {
        &self.tgrid
    }

    pub fn xgrid(&self) -> &SpaceGrid<S> {
        &self.xgrid
    }

    /// Values at time node `n`.
    pub fn slice(&self, n: usize) -> &[S] {
        let nx = self.xgrid.len();
        &self.values[n * nx..(n + 1) * nx]
    }

    pub fn gradient_slice(&self, n: usize) -> &[S] {
        let nx = self.xgrid.len();
        &self.gradients[n * nx..(n + 1) * nx]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize) -> S {
        self.values[n * self.xgrid.len() + i]
    }

    #[inline]
    pub fn gradient_at(&self, n: usize, i: usize) -> S {
        self.gradients[n * self.xgrid.len() + i]
    }

    fn bilinear(&self, data: &[S], t: S, x: S) -> Result<S> {
        let (n, wt) = self.tgrid.locate(t).ok_or(Error::OutsideGrid { t: t.as_f64(), x: x.as_f64() })?;
        let (i, wx) = self.xgrid.locate(x).ok_or(Error::OutsideGrid { t: t.as_f64(), x: x.as_f64() })?;
        let nx = self.xgrid.len();
        let row = |m: usize| data[m * nx + i] * (S::one() - wx) + data[m * nx + i + 1] * wx;
        Ok(row(n) * (S::one() - wt) + row(n + 1) * wt)
    }

    /// `V` between nodes: cubic Hermite in `x` on the stored gradients, linear in `t`.
    pub fn value(&self, t: S, x: S) -> Result<S> {
        let (n, wt) = self.tgrid.locate(t).ok_or(Error::OutsideGrid { t: t.as_f64(), x: x.as_f64() })?;
        let (i, wx) = self.xgrid.locate(x).ok_or(Error::OutsideGrid { t: t.as_f64(), x: x.as_f64() })?;
        let h = self.xgrid.spacing();
        let row = |m: usize| {
            crate::lqr::hermite(h, self.at(m, i), self.at(m, i + 1), self.gradient_at(m, i), self.gradient_at(m, i + 1), wx)
        };
        Ok(row(n) * (S::one() - wt) + row(n + 1) * wt)
    }

    /// Bilinear interpolation of `V_x`.
    pub fn gradient(&self, t: S, x: S) -> Result<S> {
        self.bilinear(&self.gradients, t, x)
    }

    /// `V_x` continued linearly beyond the space grid; `t` is clamped to `[0, T]`.
    pub fn gradient_extrapolated(&self, t: S, x: S) -> S {
        let t = t.max(S::zero()).min(self.tgrid.horizon());
        let lo = self.xgrid.x_min();
        let hi = self.xgrid.x_max();
        let h = self.xgrid.spacing();
        if x < lo {
            let g0 = self.gradient(t, lo).expect("inside");
            let g1 = self.gradient(t, lo + h).expect("inside");
            g0 + (x - lo) * (g1 - g0) / h
        } else if x > hi {
            let g0 = self.gradient(t, hi).expect("inside");
            let g1 = self.gradient(t, hi - h).expect("inside");
            g0 + (x - hi) * (g0 - g1) / h
        } else {
            self.gradient(t, x).expect("inside")
        }
    }

    /// `u(t, x) = -B / (2 k_e) V_x(t, x)`; points off the grid are rejected.
    pub fn feedback_control(&self, spec: &ProblemSpec<S>, t: S, x: S) -> Result<S> {
        Ok(spec.optimal_control(t, self.gradient(t, x)?))
    }

    /// Feedback rule usable by the simulator; `V_x` is continued linearly off the grid.
    pub fn feedback_rule<'a>(&'a self, spec: &'a ProblemSpec<S>) -> impl Fn(S, S) -> S + Sync + 'a {
        move |t, x| spec.optimal_control(t, self.gradient_extrapolated(t, x))
    }

    /// `(max V / (1 + x^2), max |V_x| / (1 + |x|))` over nodes in `[lo, hi]` at every time.
    pub fn growth_ratios(&self, lo: S, hi: S) -> (S, S) {
        let idx = self.xgrid.indices_within(lo, hi);
        let mut v_ratio = S::zero();
        let mut g_ratio = S::zero();
        for n in 0..self.tgrid.len() {
            for &i in &idx {
                let x = self.xgrid.node(i);
                v_ratio = v_ratio.max(self.at(n, i) / (S::one() + x * x));
                g_ratio = g_ratio.max(self.gradient_at(n, i).abs() / (S::one() + x.abs()));
            }
        }
        (v_ratio, g_ratio)
    }

    /// Sup of `|V - f|` over nodes in `[lo, hi]` at every time node.
    pub fn sup_error(&self, lo: S, hi: S, f: impl Fn(S, S) -> S) -> S {
        let idx = self.xgrid.indices_within(lo, hi);
        let mut err = S::zero();
        for (n, &t) in self.tgrid.nodes().iter().enumerate() {
            for &i in &idx {
                err = err.max((self.at(n, i) - f(t, self.xgrid.node(i))).abs());
            }
        }
        err
    }

    /// CSV with header `t,x,V,V_x,u_star`.
    pub fn write_csv<W: Write>(&self, spec: &ProblemSpec<S>, mut out: W) -> Result<()> {
        writeln!(out, "t,x,V,V_x,u_star")?;
        let xs = self.xgrid.nodes();
        for (n, &t) in self.tgrid.nodes().iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                let g = self.gradient_at(n, i);
                writeln!(
                    out,
                    "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    t.as_f64(),
                    x.as_f64(),
                    self.at(n, i).as_f64(),
                    g.as_f64(),
                    spec.optimal_control(t, g).as_f64()
                )?;
            }
        }
        Ok(())
    }
}

/// Centered differences inside, second-order one-sided at the edges.
fn gradient_into<S: Real>(v: &[S], h: S, out: &mut [S]) {
    let n = v.len();
    let two_h = S::lit(2.0) * h;
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / two_h;
    }
    if n >= 3 {
        out[0] = (-S::lit(3.0) * v[0] + S::lit(4.0) * v[1] - v[2]) / two_h;
        out[n - 1] = (S::lit(3.0) * v[n - 1] - S::lit(4.0) * v[n - 2] + v[n - 3]) / two_h;
    } else {
        out[0] = (v[1] - v[0]) / h;
        out[n - 1] = out[0];
    }
}

/// Coefficients of the linear operator at one time level:
/// `op(W)_i = lower_i W_{i-1} + diag_i W_i + upper_i W_{i+1} + source_i`.
struct Level<S> {
    lower: Vec<S>,
    diag: Vec<S>,
    upper: Vec<S>,
    source: Vec<S>,
    upwind: usize,
    courant_speed: S,
}

/// Assembles diffusion, drift `mu` (hybrid) and an extra centered velocity `w`.
fn assemble<S: Real>(half_sigma2: S, mu: &[S], w: &[S], source: Vec<S>, h: S) -> Level<S> {
    let n = mu.len();
    let mut lower = vec![S::zero(); n];
    let mut diag = vec![S::zero(); n];
    let mut upper = vec![S::zero(); n];
    let mut upwind = 0;
    let mut speed = S::zero();
    let d = half_sigma2 / (h * h);
    let two_h = S::lit(2.0) * h;
    let sigma2 = S::lit(2.0) * half_sigma2;
    for i in 1..n - 1 {
        let m = mu[i];
        let (ml, md, mu_) = if m.abs() * h <= sigma2 {
            (-m / two_h, S::zero(), m / two_h)
        } else {
            upwind += 1;
            if m > S::zero() {
                (S::zero(), -m / h, m / h)
            } else {
                (-m / h, m / h, S::zero())
            }
        };
        lower[i] = d + ml - w[i] / two_h;
        diag[i] = -S::lit(2.0) * d + md;
        upper[i] = d + mu_ + w[i] / two_h;
        speed = speed.max((m + w[i]).abs());
    }
    Level { lower, diag, upper, source, upwind, courant_speed: speed }
}

impl<S: Real> Level<S> {
    fn apply(&self, v: &[S], out: &mut [S]) {
        let n = v.len();
        for i in 1..n - 1 {
            out[i] = self.lower[i] * v[i - 1] + self.diag[i] * v[i] + self.upper[i] * v[i + 1] + self.source[i];
        }
    }
}

/// Scratch buffers for one Crank–Nicolson step.
struct Stepper<S> {
    lower: Vec<S>,
    diag: Vec<S>,
    upper: Vec<S>,
    rhs: Vec<S>,
    scratch: Vec<S>,
    explicit: Vec<S>,
}

impl<S: Real> Stepper<S> {
    fn new(nx: usize) -> Self {
        let m = nx - 2;
        Self {
            lower: vec![S::zero(); m],
            diag: vec![S::zero(); m],
            upper: vec![S::zero(); m],
            rhs: vec![S::zero(); m],
            scratch: vec![S::zero(); m],
            explicit: vec![S::zero(); nx],
        }
    }

    /// Explicit half `prev + dt (1 - theta) op_old(prev)`; stored for reuse across passes.
    fn prepare(&mut self, prev: &[S], old: &Level<S>, dt: S, theta: S) {
        old.apply(prev, &mut self.explicit);
        let c = dt * (S::one() - theta);
        let n = prev.len();
        for (e, &p) in self.explicit[1..n - 1].iter_mut().zip(&prev[1..n - 1]) {
            *e = p + c * *e;
        }
    }

    /// Solves `(I - theta dt L_new) V = explicit + theta dt source_new` with `V_xx = 0` at
    /// both edges, writing the full slice (edges extrapolated) into `out`.
    fn solve(&mut self, new: &Level<S>, dt: S, theta: S, step: usize, out: &mut [S]) -> Result<()> {
        let nx = out.len();
        let m = nx - 2;
        let c = theta * dt;
        for j in 0..m {
            let i = j + 1;
            self.lower[j] = -c * new.lower[i];
            self.diag[j] = S::one() - c * new.diag[i];
            self.upper[j] = -c * new.upper[i];
            self.rhs[j] = self.explicit[i] + c * new.source[i];
        }
        // V_0 = 2 V_1 - V_2 and V_{n-1} = 2 V_{n-2} - V_{n-3}.
        let l0 = self.lower[0];
        self.diag[0] += S::lit(2.0) * l0;
        self.upper[0] -= l0;
        self.lower[0] = S::zero();
        let um = self.upper[m - 1];
        self.diag[m - 1] += S::lit(2.0) * um;
        self.lower[m - 1] -= um;
        self.upper[m - 1] = S::zero();
        if !tridiag::solve_in_place(&self.lower, &self.diag, &self.upper, &mut self.rhs, &mut self.scratch) {
            return Err(Error::NonFinite { step });
        }
        out[1..nx - 1].copy_from_slice(&self.rhs);
        out[0] = S::lit(2.0) * out[1] - out[2];
        out[nx - 1] = S::lit(2.0) * out[nx - 2] - out[nx - 3];
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        Ok(())
    }
}

fn check_grids<S: Real>(spec: &ProblemSpec<S>, tgrid: &TimeGrid<S>, xgrid: &SpaceGrid<S>) -> Result<()> {
    if (tgrid.horizon() - spec.horizon).abs() > S::lit(1e-12) * spec.horizon.max(S::one()) {
        return Err(Error::InvalidGrid(format!(
            "time grid ends at {} but the horizon is {}",
            tgrid.horizon(),
            spec.horizon
        )));
    }
    if xgrid.len() < 4 {
        return Err(Error::InvalidGrid("the HJB solver needs at least 4 space nodes".into()));
    }
    if !(spec.x0 > xgrid.x_min() && spec.x0 < xgrid.x_max()) {
        return Err(Error::InvalidGrid(format!(
            "x0 = {} is not inside [{}, {}]",
            spec.x0,
            xgrid.x_min(),
            xgrid.x_max()
        )));
    }
    for &t in tgrid.nodes() {
        let k = spec.control_weight(t);
        if !(k > S::zero()) {
            return Err(Error::NonPositiveControlWeight { t: t.as_f64(), value: k.as_f64() });
        }
    }
    Ok(())
}

fn centered_gradient<S: Real>(v: &[S], h: S, out: &mut [S]) {
    let two_h = S::lit(2.0) * h;
    for i in 1..v.len() - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / two_h;
    }
}

fn hjb_level<S: Real>(spec: &ProblemSpec<S>, t: S, xs: &[S], grad: &[S], h: S) -> Level<S> {
    let sigma = spec.diffusion.eval(t);
    let q = spec.gradient_penalty(t);
    let mu: Vec<S> = xs.iter().map(|&x| spec.drift(t, x)).collect();
    let w: Vec<S> = grad.iter().map(|&g| -q * g).collect();
    let source = xs.iter().map(|&x| spec.running_cost(t, x)).collect();
    assemble(sigma * sigma / S::lit(2.0), &mu, &w, source, h)
}

fn sawtooth_nodes<S: Real>(v: &[S]) -> usize {
    let n = v.len();
    if n < 5 {
        return 0;
    }
    let d2: Vec<S> = (1..n - 1).map(|i| v[i + 1] - S::lit(2.0) * v[i] + v[i - 1]).collect();
    let scale = v.iter().fold(S::zero(), |a, &b| a.max(b.abs())).max(S::one());
    let tol = S::lit(1e-9) * scale;
    (1..d2.len() - 1)
        .filter(|&j| d2[j].abs() > tol && d2[j - 1] * d2[j] < S::zero() && d2[j] * d2[j + 1] < S::zero())
        .count()
}

/// Solves the HJB equation backward from `g(x) = k2 (x - xi(T))^2`.
pub fn solve_hjb<S: Real>(
    spec: &ProblemSpec<S>,
    tgrid: &TimeGrid<S>,
    xgrid: &SpaceGrid<S>,
    scheme: &SchemeConfig<S>,
) -> Result<ValueSurface<S>> {
    check_grids(spec, tgrid, xgrid)?;
    scheme.check()?;
    let nx = xgrid.len();
    let steps = tgrid.steps();
    let h = xgrid.spacing();
    let xs = xgrid.nodes();
    let theta = scheme.theta;
    let times = tgrid.nodes();

    let mut values = vec![S::zero(); (steps + 1) * nx];
    for (i, &x) in xs.iter().enumerate() {
        values[steps * nx + i] = spec.terminal_cost(x);
    }

    let mut stepper = Stepper::new(nx);
    let mut grad = vec![S::zero(); nx];
    let mut iterate = vec![S::zero(); nx];
    let mut previous = vec![S::zero(); nx];
    let mut meta = SurfaceMeta {
        scheme: format!("theta = {theta}, Picard passes = {}", scheme.picard_iterations),
        theta,
        picard_iterations: scheme.picard_iterations,
        max_picard_correction: S::zero(),
        unconverged_steps: 0,
        upwind_nodes: 0,
        max_courant: S::zero(),
        oscillating_nodes: 0,
        boundary: "V_xx = 0 at both edges".into(),
    };

    for n in (0..steps).rev() {
        let dt = times[n + 1] - times[n];
        let (done, rest) = values.split_at_mut((n + 1) * nx);
        let prev = &rest[..nx];
        let cur = &mut done[n * nx..];

        centered_gradient(prev, h, &mut grad);
        let old = hjb_level(spec, times[n + 1], &xs, &grad, h);
        stepper.prepare(prev, &old, dt, theta);

        // Predictor: lagged gradient from the previous slice.
        let mut level = hjb_level(spec, times[n], &xs, &grad, h);
        stepper.solve(&level, dt, theta, n, &mut iterate)?;
        let mut last = S::infinity();
        let mut correction = S::zero();
        for pass in 0..scheme.picard_iterations {
            previous.copy_from_slice(&iterate);
            centered_gradient(&iterate, h, &mut grad);
            level = hjb_level(spec, times[n], &xs, &grad, h);
            stepper.solve(&level, dt, theta, n, &mut iterate)?;
            correction = iterate.iter().zip(&previous).fold(S::zero(), |a, (&u, &v)| a.max((u - v).abs()));
            if !correction.is_finite() {
                return Err(Error::NonFinite { step: n });
            }
            if pass > 0 && correction > last && correction > scheme.picard_tol {
                return Err(Error::FixedPointDiverged { step: n, correction: correction.as_f64() });
            }
            if correction <= scheme.picard_tol {
                break;
            }
            last = correction;
        }
        if scheme.picard_iterations > 0 && correction > scheme.picard_tol {
            meta.unconverged_steps += 1;
        }
        meta.max_picard_correction = meta.max_picard_correction.max(correction);
        meta.upwind_nodes += level.upwind;
        meta.max_courant = meta.max_courant.max(level.courant_speed * dt / h);
        meta.oscillating_nodes += sawtooth_nodes(&iterate);
        cur[..nx].copy_from_slice(&iterate);
    }
    if meta.oscillating_nodes > 0 {
        log::warn!(
            "HJB solution oscillates at {} node-steps (max Courant number {})",
            meta.oscillating_nodes,
            meta.max_courant
        );
    }
    if meta.unconverged_steps > 0 {
        log::debug!(
            "{} steps ended with Picard correction above tolerance (max {})",
            meta.unconverged_steps,
            meta.max_picard_correction
        );
    }
    ValueSurface::from_values(tgrid.clone(), xgrid.clone(), values, meta)
}

/// Solves the linearized equation for the first-order correction `V1`:
///
/// ```text
/// V1_t + sigma^2 / 2 V1_xx + (A x - 2 q V0_x) V1_x + r V0_x = 0,   V1(T, x) = 0,
/// ```
///
/// with the same Crank–Nicolson stencils as [`solve_hjb`], so `V^delta - V0 - delta V1` is
/// second order in `delta` at the discrete level as well.
pub fn solve_linearized<S: Real>(
    spec: &ProblemSpec<S>,
    v0: &ValueSurface<S>,
    scheme: &SchemeConfig<S>,
) -> Result<ValueSurface<S>> {
    let tgrid = v0.tgrid();
    let xgrid = v0.xgrid();
    check_grids(spec, tgrid, xgrid)?;
    scheme.check()?;
    let nx = xgrid.len();
    let steps = tgrid.steps();
    let h = xgrid.spacing();
    let xs = xgrid.nodes();
    let times = tgrid.nodes();
    let theta = scheme.theta;

    let level_at = |n: usize, grad: &mut [S]| -> Level<S> {
        let t = times[n];
        centered_gradient(v0.slice(n), h, grad);
        let sigma = spec.diffusion.eval(t);
        let a = spec.drift_linear.eval(t);
        let q = spec.gradient_penalty(t);
        let mu: Vec<S> = xs.iter().map(|&x| a * x).collect();
        let w: Vec<S> = grad.iter().map(|&g| -S::lit(2.0) * q * g).collect();
        let source = xs.iter().zip(grad.iter()).map(|(&x, &g)| spec.perturbation.eval(t, x) * g).collect();
        assemble(sigma * sigma / S::lit(2.0), &mu, &w, source, h)
    };

    let mut values = vec![S::zero(); (steps + 1) * nx];
    let mut stepper = Stepper::new(nx);
    let mut grad = vec![S::zero(); nx];
    let mut slice = vec![S::zero(); nx];
    let mut meta = SurfaceMeta {
        scheme: format!("linearized, theta = {theta}"),
        theta,
        picard_iterations: 0,
        max_picard_correction: S::zero(),
        unconverged_steps: 0,
        upwind_nodes: 0,
        max_courant: S::zero(),
        oscillating_nodes: 0,
        boundary: "V_xx = 0 at both edges".into(),
    };
    let mut new_level = level_at(steps, &mut grad);
    for n in (0..steps).rev() {
        let dt = times[n + 1] - times[n];
        let old = new_level;
        new_level = level_at(n, &mut grad);
        let prev = &values[(n + 1) * nx..(n + 2) * nx];
        stepper.prepare(prev, &old, dt, theta);
        stepper.solve(&new_level, dt, theta, n, &mut slice)?;
        meta.upwind_nodes += new_level.upwind;
        meta.max_courant = meta.max_courant.max(new_level.courant_speed * dt / h);
        meta.oscillating_nodes += sawtooth_nodes(&slice);
        values[n * nx..(n + 1) * nx].copy_from_slice(&slice);
    }
    ValueSurface::from_values(tgrid.clone(), xgrid.clone(), values, meta)
}

/// Discrete residual of the HJB equation on every step and node.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField<S> {
    xgrid: SpaceGrid<S>,
    steps: usize,
    /// Row `n` holds the residual of the step `t_n -> t_{n+1}`; edge entries are zero.
    pub values: Vec<S>,
}

impl<S: Real> ResidualField<S> {
    /// Sup over interior nodes and all steps.
    pub fn sup(&self) -> S {
        self.values.iter().fold(S::zero(), |a, &b| a.max(b.abs()))
    }

    /// Sup over nodes inside `[lo, hi]`.
    pub fn sup_within(&self, lo: S, hi: S) -> S {
        let idx = self.xgrid.indices_within(lo, hi);
        let nx = self.xgrid.len();
        let mut m = S::zero();
        for n in 0..self.steps {
            for &i in &idx {
                m = m.max(self.values[n * nx + i].abs());
            }
        }
        m
    }

    pub fn at(&self, n: usize, i: usize) -> S {
        self.values[n * self.xgrid.len() + i]
    }
}

/// Evaluates `V_t + sigma^2/2 V_xx + mu V_x + l_e (x - xi)^2 - q V_x^2` with the solver's
/// stencils, theta-averaged between the two levels of each step, keeping the quadratic term
/// exact.
pub fn hjb_residual<S: Real>(surface: &ValueSurface<S>, spec: &ProblemSpec<S>) -> ResidualField<S> {
    let xgrid = surface.xgrid().clone();
    let nx = xgrid.len();
    let h = xgrid.spacing();
    let xs = xgrid.nodes();
    let times = surface.tgrid().nodes();
    let steps = surface.tgrid().steps();
    let theta = surface.meta.theta;
    let mut values = vec![S::zero(); steps * nx];
    let mut grad = vec![S::zero(); nx];
    let mut op_new = vec![S::zero(); nx];
    let mut op_old = vec![S::zero(); nx];
    for n in 0..steps {
        let dt = times[n + 1] - times[n];
        let cur = surface.slice(n);
        let next = surface.slice(n + 1);
        centered_gradient(cur, h, &mut grad);
        hjb_level(spec, times[n], &xs, &grad, h).apply(cur, &mut op_new);
        centered_gradient(next, h, &mut grad);
        hjb_level(spec, times[n + 1], &xs, &grad, h).apply(next, &mut op_old);
        for i in 1..nx - 1 {
            values[n * nx + i] =
                (next[i] - cur[i]) / dt + theta * op_new[i] + (S::one() - theta) * op_old[i];
        }
    }
    ResidualField { xgrid, steps, values }
}

/// `U = exp(-H(t) V)` on the surface's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSurface<S> {
    tgrid: TimeGrid<S>,
    xgrid: SpaceGrid<S>,
    /// `H(t_n)` per time node.
    pub h: Vec<S>,
    pub u: Vec<S>,
    /// Nodes with `U > 1`, i.e. `V < 0`.
    pub violations: usize,
}

impl<S: Real> TransformedSurface<S> {
    pub fn at(&self, n: usize, i: usize) -> S {
        self.u[n * self.xgrid.len() + i]
    }

    /// `Lambda = -H U Z` for a given `Z` at node `(n, i)`.
    pub fn lambda(&self, n: usize, i: usize, z: S) -> S {
        -self.h[n] * self.at(n, i) * z
    }

    /// `(min U, max U)` over all nodes.
    pub fn range(&self) -> (S, S) {
        self.u.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub fn exp_transform<S: Real>(surface: &ValueSurface<S>, spec: &ProblemSpec<S>) -> Result<TransformedSurface<S>> {
    let nx = surface.xgrid().len();
    let h: Vec<S> = surface.tgrid().nodes().iter().map(|&t| spec.h_ratio(t)).collect();
    if let Some((n, _)) = h.iter().enumerate().find(|(_, v)| !(**v > S::zero())) {
        return Err(Error::InvalidProblem(format!("H(t) is not positive at t = {}", surface.tgrid().nodes()[n])));
    }
    let u: Vec<S> = surface.values().iter().enumerate().map(|(k, &v)| (-h[k / nx] * v).exp()).collect();
    let violations = u.iter().filter(|&&v| v > S::one()).count();
    if violations > 0 {
        log::warn!("{violations} nodes have U > 1 (negative value function)");
    }
    Ok(TransformedSurface { tgrid: surface.tgrid().clone(), xgrid: surface.xgrid().clone(), h, u, violations })
}

/// `V = -ln(U) / H(t)`.
pub fn inverse_transform<S: Real>(ts: &TransformedSurface<S>) -> Result<ValueSurface<S>> {
    let nx = ts.xgrid.len();
    let values = ts.u.iter().enumerate().map(|(k, &u)| -u.ln() / ts.h[k / nx]).collect();
    ValueSurface::from_values(ts.tgrid.clone(), ts.xgrid.clone(), values, SurfaceMeta::injected("inverse transform"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::{Perturbation, TimeFn};
    use crate::lqr::ConstantExample;

    fn benchmark() -> ProblemSpec<f64> {
        ProblemSpec::builder().build().unwrap()
    }

    fn small_grids() -> (TimeGrid<f64>, SpaceGrid<f64>) {
        (TimeGrid::uniform(1.0, 200).unwrap(), SpaceGrid::new(-6.0, 6.0, 121).unwrap())
    }

    #[test]
    fn reproduces_closed_form_on_inner_window() {
        let (tg, xg) = small_grids();
        let surface = solve_hjb(&benchmark(), &tg, &xg, &SchemeConfig::default()).unwrap();
        let ex = ConstantExample::<f64>::from_c(1.0, 0.0, 1.0, 1.0).unwrap();
        let err = surface.sup_error(-2.0, 2.0, |t, x| ex.value(t, x));
        assert!(err < 1e-3, "sup error {err}");
        assert_eq!(surface.meta.oscillating_nodes, 0);
        let u = surface.feedback_control(&benchmark(), 0.0, 1.0).unwrap();
        assert!((u + 1f64.tanh()).abs() < 1e-3);
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let spec = ProblemSpec::<f64>::builder().state_cost(TimeFn::Constant(0.0)).build().unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        assert_eq!(s.feedback_control(&spec, 0.5, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn terminal_slice_is_exact() {
        let spec = ProblemSpec::<f64>::builder().terminal_weight(0.7).target(TimeFn::Constant(0.5)).build().unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        let last = tg.steps();
        for (i, x) in xg.nodes().into_iter().enumerate() {
            assert_eq!(s.at(last, i), spec.terminal_cost(x));
        }
    }

    #[test]
    fn injected_closed_form_has_small_residual() {
        let tg = TimeGrid::uniform(1.0, 2000).unwrap();
        let xg = SpaceGrid::new(-6.0, 6.0, 401).unwrap();
        let ex = ConstantExample::<f64>::from_c(1.0, 0.0, 1.0, 1.0).unwrap();
        let s = ValueSurface::from_fn(tg, xg, |t, x| ex.value(t, x));
        let r = hjb_residual(&s, &benchmark());
        let inner = r.sup_within(-2.0, 2.0);
        assert!(inner < 1e-6, "residual {inner}");
    }

    #[test]
    fn zero_surface_residual_is_running_cost() {
        let (tg, xg) = small_grids();
        let s = ValueSurface::from_fn(tg, xg.clone(), |_, _| 0.0);
        let r = hjb_residual(&s, &benchmark());
        for i in 1..xg.len() - 1 {
            let x = xg.node(i);
            assert!((r.at(3, i) - x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn solver_residual_below_tolerance() {
        let spec = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.05).unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        let r = hjb_residual(&s, &spec);
        assert!(r.sup() < 1e-4, "residual {}", r.sup());
    }

    #[test]
    fn transform_round_trip() {
        let (tg, xg) = small_grids();
        let spec = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.1).unwrap();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        let ts = exp_transform(&s, &spec).unwrap();
        let (lo, hi) = ts.range();
        assert!(lo > 0.0 && hi <= 1.0);
        assert_eq!(ts.violations, 0);
        let back = inverse_transform(&ts).unwrap();
        let gap = back.values().iter().zip(s.values()).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(gap <= 1e-12, "{gap}");
    }

    #[test]
    fn transform_identities() {
        let (tg, xg) = small_grids();
        let spec = benchmark();
        let h = spec.h_ratio(0.0);
        let s = ValueSurface::from_fn(tg, xg, |_, x| if x > 0.0 { 2f64.ln() / h } else { 0.0 });
        let ts = exp_transform(&s, &spec).unwrap();
        assert_eq!(ts.at(0, 0), 1.0);
        assert!((ts.at(0, 120) - 0.5).abs() < 1e-15);
        let neg = ValueSurface::from_fn(TimeGrid::uniform(1.0, 2).unwrap(), SpaceGrid::new(-1.0, 1.0, 5).unwrap(), |_, _| -1.0);
        assert_eq!(exp_transform(&neg, &spec).unwrap().violations, 15);
    }

    #[test]
    fn value_monotone_in_state_weight() {
        let (tg, xg) = small_grids();
        for (lo, hi) in [(0.5, 1.0), (1.0, 2.5)] {
            let a = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.1)
                .map(|s| ProblemSpec { state_cost: TimeFn::Constant(lo), ..s })
                .unwrap();
            let b = ProblemSpec { state_cost: TimeFn::Constant(hi), ..a.clone() };
            let va = solve_hjb(&a, &tg, &xg, &SchemeConfig::default()).unwrap();
            let vb = solve_hjb(&b, &tg, &xg, &SchemeConfig::default()).unwrap();
            assert!(va.values().iter().zip(vb.values()).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn feedback_is_argmin_of_hamiltonian() {
        let spec = ProblemSpec::cubic_example(1.3, 0.8, 1.0, 0.0, 0.1).unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        for &(t, x) in &[(0.0, 1.0), (0.5, -2.0), (0.9, 0.3)] {
            let p = s.gradient(t, x).unwrap();
            let u = s.feedback_control(&spec, t, x).unwrap();
            let best = spec.control_hamiltonian(t, u, p);
            for k in -100..=100 {
                let v = u + 0.01 * k as f64;
                assert!(spec.control_hamiltonian(t, v, p) >= best - 1e-12);
            }
        }
        assert!(matches!(s.feedback_control(&spec, 0.0, 7.0), Err(Error::OutsideGrid { .. })));
    }

    #[test]
    fn no_gain_means_no_control() {
        let spec = ProblemSpec::<f64>::builder().control_gain(TimeFn::Constant(0.0)).build().unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        assert_eq!(s.feedback_control(&spec, 0.2, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn perturbed_solution_is_even() {
        let spec = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.2).unwrap();
        let (tg, xg) = small_grids();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        let nx = xg.len();
        for n in [0, 50, 150] {
            for i in 0..nx / 2 {
                let a = s.at(n, i);
                let b = s.at(n, nx - 1 - i);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        assert!(s.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cubic_drift_lowers_value_and_upwinds_when_stiff() {
        let (tg, xg) = small_grids();
        let v0 = solve_hjb(&benchmark(), &tg, &xg, &SchemeConfig::default()).unwrap();
        let spec = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let vd = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        assert!(vd.value(0.0, 1.0).unwrap() < v0.value(0.0, 1.0).unwrap());
        assert!(vd.meta.upwind_nodes > 0);
        assert_eq!(v0.meta.upwind_nodes, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = benchmark();
        let tg = TimeGrid::uniform(2.0, 10).unwrap();
        let xg = SpaceGrid::new(-6.0, 6.0, 41).unwrap();
        assert!(matches!(solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()), Err(Error::InvalidGrid(_))));
        let tg = TimeGrid::uniform(1.0, 10).unwrap();
        let narrow = SpaceGrid::new(2.0, 6.0, 41).unwrap();
        assert!(solve_hjb(&spec, &tg, &narrow, &SchemeConfig::default()).is_err());
        let bad = SchemeConfig { theta: 0.2, ..SchemeConfig::default() };
        assert!(solve_hjb(&spec, &tg, &xg, &bad).is_err());
        let bad_k = ProblemSpec::<f64>::builder().control_cost(TimeFn::Constant(-1.0)).build().unwrap();
        assert!(matches!(
            solve_hjb(&bad_k, &tg, &xg, &SchemeConfig::default()),
            Err(Error::NonPositiveControlWeight { .. })
        ));
    }

    #[test]
    fn linearized_solve_vanishes_without_perturbation() {
        let (tg, xg) = small_grids();
        let v0 = solve_hjb(&benchmark(), &tg, &xg, &SchemeConfig::default()).unwrap();
        let v1 = solve_linearized(&benchmark(), &v0, &SchemeConfig::default()).unwrap();
        assert!(v1.values().iter().all(|&v| v == 0.0));
        let cubic = ProblemSpec { perturbation: Perturbation::NegCubic, ..benchmark() };
        let v1 = solve_linearized(&cubic, &v0, &SchemeConfig::default()).unwrap();
        assert!(v1.value(0.0, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn gradient_stencil_is_exact_on_quadratics() {
        let tg = TimeGrid::<f64>::uniform(1.0, 2).unwrap();
        let xg = SpaceGrid::new(-1.0, 2.0, 13).unwrap();
        let s = ValueSurface::from_fn(tg, xg.clone(), |_, x| 3.0 * x * x - x + 2.0);
        for i in 0..xg.len() {
            assert!((s.gradient_at(1, i) - (6.0 * xg.node(i) - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_solve() {
        let spec = ProblemSpec::<f32>::builder().build().unwrap();
        let tg = TimeGrid::uniform(1.0f32, 200).unwrap();
        let xg = SpaceGrid::new(-6.0f32, 6.0, 121).unwrap();
        let s = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
        assert!((s.value(0.0, 1.0).unwrap() - 1.195_375).abs() < 1e-3);
    }
}
