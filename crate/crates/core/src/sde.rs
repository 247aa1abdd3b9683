//! Euler–Maruyama simulation of the forward state and moment diagnostics.
//!
//! Three forward processes share one set of Brownian increments:
//!
//! * controlled: `dX = [A X + delta r + B u(t, X)] dt + sigma dW`
//! * control-free: the same with `u = 0`
//! * driftless: `dX = sigma dW`
//!
//! Path `p` draws its increments from a ChaCha8 stream selected by `(seed, p)`, so a bundle
//! is identical regardless of how paths are distributed over threads.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::{ObservedConstants, ProblemSpec};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    Controlled,
    ControlFree,
    Driftless,
}

/// Gaussian increments `dW[n][p]`, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements<S> {
    seed: u64,
    grid: TimeGrid<S>,
    n_paths: usize,
    dw: Vec<S>,
}

impl<S: Real> BrownianIncrements<S> {
    pub fn generate(grid: &TimeGrid<S>, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::InvalidArgument("need at least one path".into()));
        }
        let steps = grid.steps();
        let sqrt_dt: Vec<S> = (0..steps).map(|n| grid.step(n).sqrt()).collect();
        let by_path: Vec<Vec<S>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                sqrt_dt
                    .iter()
                    .map(|&s| {
                        let z: f64 = rng.sample(StandardNormal);
                        S::lit(z) * s
                    })
                    .collect()
            })
            .collect();
        let mut dw = vec![S::zero(); steps * n_paths];
        for (p, row) in by_path.iter().enumerate() {
            for (n, &v) in row.iter().enumerate() {
                dw[n * n_paths + p] = v;
            }
        }
        Ok(Self { seed, grid: grid.clone(), n_paths, dw })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Increments over step `n` for every path.
    pub fn step(&self, n: usize) -> &[S] {
        &self.dw[n * self.n_paths..(n + 1) * self.n_paths]
    }

    /// Sums `factor` consecutive increments: the same Brownian paths on a coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let np = self.n_paths;
        let mut dw = vec![S::zero(); grid.steps() * np];
        for n in 0..self.grid.steps() {
            let target = n / factor;
            for (acc, &v) in dw[target * np..(target + 1) * np].iter_mut().zip(self.step(n)) {
                *acc += v;
            }
        }
        Ok(Self { seed: self.seed, grid, n_paths: np, dw })
    }

    /// Increments of the listed paths, in the listed order.
    pub fn select(&self, paths: &[usize]) -> Self {
        let np = paths.len();
        let mut dw = Vec::with_capacity(self.grid.steps() * np);
        for n in 0..self.grid.steps() {
            let row = self.step(n);
            dw.extend(paths.iter().map(|&p| row[p]));
        }
        Self { seed: self.seed, grid: self.grid.clone(), n_paths: np, dw }
    }
}

/// Simulated forward paths, time-major, with the increments that drove them.
#[derive(Debug, Clone)]
pub struct PathBundle<S> {
    flavor: Flavor,
    increments: Arc<BrownianIncrements<S>>,
    states: Vec<S>,
    sigma: Vec<S>,
    exploded: Vec<bool>,
    explosion_cap: S,
}

impl<S: Real> PathBundle<S> {
    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn seed(&self) -> u64 {
        self.increments.seed
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.increments.grid
    }

    pub fn n_paths(&self) -> usize {
        self.increments.n_paths
    }

    pub fn increments(&self) -> &Arc<BrownianIncrements<S>> {
        &self.increments
    }

    /// States of every path at time node `n`.
    pub fn states(&self, n: usize) -> &[S] {
        let np = self.n_paths();
        &self.states[n * np..(n + 1) * np]
    }

    pub fn path(&self, p: usize) -> Vec<S> {
        let np = self.n_paths();
        (0..self.grid().len()).map(|n| self.states[n * np + p]).collect()
    }

    /// `sigma(t_n)`.
    pub fn sigma(&self, n: usize) -> S {
        self.sigma[n]
    }

    pub fn exploded(&self) -> &[bool] {
        &self.exploded
    }

    pub fn explosion_count(&self) -> usize {
        self.exploded.iter().filter(|&&e| e).count()
    }

    pub fn explosion_cap(&self) -> S {
        self.explosion_cap
    }

    pub fn x0(&self) -> S {
        self.states[0]
    }

    /// Bundle restricted to the listed paths (with repetition), keeping the flavor.
    pub fn select(&self, paths: &[usize]) -> Self {
        let np = self.n_paths();
        let mut states = Vec::with_capacity(self.grid().len() * paths.len());
        for n in 0..self.grid().len() {
            states.extend(paths.iter().map(|&p| self.states[n * np + p]));
        }
        Self {
            flavor: self.flavor,
            increments: Arc::new(self.increments.select(paths)),
            states,
            sigma: self.sigma.clone(),
            exploded: paths.iter().map(|&p| self.exploded[p]).collect(),
            explosion_cap: self.explosion_cap,
        }
    }
}

/// Feedback rule `u(t, x)`.
pub type ControlRule<'a, S> = &'a (dyn Fn(S, S) -> S + Sync);

#[derive(Debug, Clone, Copy)]
pub struct SimConfig<S> {
    /// Paths with `|X| > explosion_cap` are frozen and flagged.
    pub explosion_cap: S,
    /// Half-width of the window probed for linear growth of the control.
    pub growth_probe: S,
}

impl<S: Real> Default for SimConfig<S> {
    fn default() -> Self {
        Self { explosion_cap: S::lit(1e6), growth_probe: S::lit(50.0) }
    }
}

/// Probes `|u(t, x)| / (1 + |x|)` and rejects rules whose ratio keeps growing between the
/// inner half of the window and the full window.
pub fn check_linear_growth<S: Real>(control: ControlRule<'_, S>, horizon: S, x_max: S) -> Result<S> {
    let mut full = (S::zero(), S::zero());
    let mut half = S::zero();
    for i in 0..=8 {
        let t = horizon * S::from_count(i) / S::lit(8.0);
        for j in 0..=100 {
            let x = -x_max + x_max * S::from_count(j) / S::lit(50.0);
            let ratio = control(t, x).abs() / (S::one() + x.abs());
            if !ratio.is_finite() {
                return Err(Error::ControlGrowth { x: x.as_f64(), ratio: f64::INFINITY });
            }
            if ratio > full.0 {
                full = (ratio, x);
            }
            if x.abs() <= x_max / S::lit(2.0) {
                half = half.max(ratio);
            }
        }
    }
    if full.0 > S::lit(1.5) * half.max(S::one()) {
        return Err(Error::ControlGrowth { x: full.1.as_f64(), ratio: full.0.as_f64() });
    }
    Ok(full.0)
}

/// Simulates `n_paths` paths on a uniform grid with `n_steps` steps over `[0, T]`.
pub fn simulate<S: Real>(
    spec: &ProblemSpec<S>,
    flavor: Flavor,
    control: Option<ControlRule<'_, S>>,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<PathBundle<S>> {
    let grid = TimeGrid::uniform(spec.horizon, n_steps)?;
    let inc = Arc::new(BrownianIncrements::generate(&grid, n_paths, seed)?);
    simulate_with(spec, flavor, control, inc, &SimConfig::default())
}

/// Simulates on existing increments, which couples bundles of different flavors.
pub fn simulate_with<S: Real>(
    spec: &ProblemSpec<S>,
    flavor: Flavor,
    control: Option<ControlRule<'_, S>>,
    increments: Arc<BrownianIncrements<S>>,
    cfg: &SimConfig<S>,
) -> Result<PathBundle<S>> {
    let grid = increments.grid.clone();
    if (grid.horizon() - spec.horizon).abs() > S::lit(1e-12) * spec.horizon.max(S::one()) {
        return Err(Error::InvalidGrid("increments do not span the problem horizon".into()));
    }
    let control = match (flavor, control) {
        (Flavor::Controlled, Some(u)) => {
            check_linear_growth(u, spec.horizon, cfg.growth_probe)?;
            Some(u)
        }
        (Flavor::Controlled, None) => {
            return Err(Error::InvalidArgument("controlled flavor needs a control rule".into()));
        }
        _ => None,
    };
    let np = increments.n_paths;
    let steps = grid.steps();
    let times = grid.nodes();
    let sigma: Vec<S> = times.iter().map(|&t| spec.diffusion.eval(t)).collect();
    let mut states = vec![S::zero(); (steps + 1) * np];
    states[..np].iter_mut().for_each(|x| *x = spec.x0);
    let mut exploded = vec![false; np];
    let cap = cfg.explosion_cap;

    for n in 0..steps {
        let t = times[n];
        let dt = grid.step(n);
        let b = spec.control_gain.eval(t);
        let s = sigma[n];
        let (head, tail) = states.split_at_mut((n + 1) * np);
        let cur = &head[n * np..];
        let next = &mut tail[..np];
        next.par_iter_mut()
            .zip(exploded.par_iter_mut())
            .zip(cur.par_iter().zip(increments.step(n).par_iter()))
            .for_each(|((nx, flag), (&x, &dw))| {
                if *flag {
                    *nx = x;
                    return;
                }
                let drift = match flavor {
                    Flavor::Driftless => S::zero(),
                    Flavor::ControlFree => spec.drift(t, x),
                    Flavor::Controlled => spec.drift(t, x) + b * control.expect("checked above")(t, x),
                };
                let v = x + drift * dt + s * dw;
                if !v.is_finite() || v.abs() > cap {
                    *flag = true;
                    *nx = x;
                } else {
                    *nx = v;
                }
            });
    }
    let bundle = PathBundle { flavor, increments, states, sigma, exploded, explosion_cap: cap };
    if bundle.explosion_count() > 0 {
        log::warn!("{} of {np} paths exceeded the cap {cap}", bundle.explosion_count());
    }
    Ok(bundle)
}

/// Mean and standard error of `f` over retained paths at node `n`.
fn retained_stats<S: Real>(bundle: &PathBundle<S>, n: usize, f: impl Fn(S) -> S) -> (S, S, usize) {
    let mut sum = S::zero();
    let mut sum2 = S::zero();
    let mut count = 0usize;
    for (&x, &e) in bundle.states(n).iter().zip(bundle.exploded()) {
        if !e {
            let v = f(x);
            sum += v;
            sum2 += v * v;
            count += 1;
        }
    }
    if count == 0 {
        return (S::nan(), S::nan(), 0);
    }
    let c = S::from_count(count);
    let mean = sum / c;
    let var = (sum2 / c - mean * mean).max(S::zero());
    let se = if count > 1 { (var / (c - S::one())).sqrt() } else { S::zero() };
    (mean, se, count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport<S> {
    pub p: S,
    /// `max{delta C + (p - 1)/2 max sigma^2, delta C + max A}`.
    pub c_tilde: S,
    pub times: Vec<S>,
    pub empirical: Vec<S>,
    pub std_err: Vec<S>,
    pub bound: Vec<S>,
    pub passed: bool,
    /// First time where the empirical moment exceeded `bound + 3 SE`.
    pub first_failure: Option<S>,
    /// Smallest `C` such that `empirical <= 2^{p/2-1} (1 + |x0|^p) e^{C p t}` at every time.
    pub fitted_c: S,
}

/// `2^{p/2 - 1} (1 + |x0|^p) e^{c p t}`.
pub fn moment_bound<S: Real>(p: S, x0: S, c_tilde: S, t: S) -> S {
    S::lit(2.0).powf(p / S::lit(2.0) - S::one()) * (S::one() + x0.abs().powf(p)) * (c_tilde * p * t).exp()
}

/// Compares `E|X_t|^p` with the moment estimate built from observed constants.
pub fn moment_check<S: Real>(
    bundle: &PathBundle<S>,
    p: S,
    spec: &ProblemSpec<S>,
    constants: &ObservedConstants<S>,
) -> Result<MomentReport<S>> {
    if !(p >= S::lit(2.0)) {
        return Err(Error::InvalidArgument(format!("moment order must be at least 2, got {p}")));
    }
    let dc = spec.delta.abs() * constants.growth_c;
    let c_tilde = (dc + (p - S::one()) / S::lit(2.0) * constants.sigma_max * constants.sigma_max)
        .max(dc + constants.drift_linear_max);
    let x0 = bundle.x0();
    let times = bundle.grid().nodes().to_vec();
    let mut empirical = Vec::with_capacity(times.len());
    let mut std_err = Vec::with_capacity(times.len());
    let mut bound = Vec::with_capacity(times.len());
    let mut first_failure = None;
    let mut fitted_c = S::neg_infinity();
    let prefactor = S::lit(2.0).powf(p / S::lit(2.0) - S::one()) * (S::one() + x0.abs().powf(p));
    for (n, &t) in times.iter().enumerate() {
        let (m, se, _) = retained_stats(bundle, n, |x| x.abs().powf(p));
        let b = moment_bound(p, x0, c_tilde, t);
        if first_failure.is_none() && !(m <= b + S::lit(3.0) * se) {
            first_failure = Some(t);
        }
        if t > S::zero() {
            fitted_c = fitted_c.max((m / prefactor).ln() / (p * t));
        }
        empirical.push(m);
        std_err.push(se);
        bound.push(b);
    }
    Ok(MomentReport {
        p,
        c_tilde,
        times,
        empirical,
        std_err,
        bound,
        passed: first_failure.is_none(),
        first_failure,
        fitted_c: fitted_c.max(S::zero()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport<S> {
    pub times: Vec<S>,
    /// `E (X*_t - X_t)^2` over paths retained in both bundles.
    pub empirical: Vec<S>,
    pub std_err: Vec<S>,
    /// `C1 (1 + x0^2) e^{M t}` with `C1 = max B^2 C_V / epsilon`, `M = 2 max A + 2 delta K + 1`.
    pub bound: Vec<S>,
    pub c1: S,
    pub rate: S,
    /// `max_t E(X* - X)^2 / ((1 + x0^2) e^{M t})`.
    pub fitted_constant: S,
    pub passed: bool,
}

/// Mean-square gap between a controlled bundle and a control-free bundle driven by the same
/// increments. `value_growth` bounds `V(s, x) / (1 + x^2)`; it enters because the optimal
/// control's energy is paid out of the value.
pub fn deviation_check<S: Real>(
    controlled: &PathBundle<S>,
    control_free: &PathBundle<S>,
    spec: &ProblemSpec<S>,
    constants: &ObservedConstants<S>,
    value_growth: S,
) -> Result<DeviationReport<S>> {
    let same_noise = Arc::ptr_eq(&controlled.increments, &control_free.increments)
        || (controlled.seed() == control_free.seed()
            && controlled.grid() == control_free.grid()
            && controlled.n_paths() == control_free.n_paths());
    if !same_noise {
        return Err(Error::Uncoupled(format!(
            "seeds {} and {} or grids differ",
            controlled.seed(),
            control_free.seed()
        )));
    }
    let x0 = controlled.x0();
    let c1 = constants.control_gain_max * constants.control_gain_max * value_growth / constants.epsilon;
    let rate = S::lit(2.0) * constants.drift_linear_max + S::lit(2.0) * spec.delta.abs() * constants.lipschitz_k + S::one();
    let np = controlled.n_paths();
    let times = controlled.grid().nodes().to_vec();
    let mut empirical = Vec::with_capacity(times.len());
    let mut std_err = Vec::with_capacity(times.len());
    let mut bound = Vec::with_capacity(times.len());
    let mut fitted = S::zero();
    let mut passed = true;
    for (n, &t) in times.iter().enumerate() {
        let (a, b) = (controlled.states(n), control_free.states(n));
        let mut sum = S::zero();
        let mut sum2 = S::zero();
        let mut count = 0usize;
        for p in 0..np {
            if controlled.exploded[p] || control_free.exploded[p] {
                continue;
            }
            let d = a[p] - b[p];
            sum += d * d;
            sum2 += d * d * d * d;
            count += 1;
        }
        let c = S::from_count(count.max(1));
        let mean = sum / c;
        let se = if count > 1 { ((sum2 / c - mean * mean).max(S::zero()) / (c - S::one())).sqrt() } else { S::zero() };
        let growth = (S::one() + x0 * x0) * (rate * t).exp();
        let bd = c1 * growth;
        passed &= mean <= bd + S::lit(3.0) * se;
        fitted = fitted.max(mean / growth);
        empirical.push(mean);
        std_err.push(se);
        bound.push(bd);
    }
    Ok(DeviationReport { times, empirical, std_err, bound, c1, rate, fitted_constant: fitted, passed })
}

/// Monte Carlo cost of the zero control from `(0, x0)`: trapezoid rule in time plus the
/// terminal cost. Returns `(estimate, standard error)`.
pub fn zero_control_cost<S: Real>(bundle: &PathBundle<S>, spec: &ProblemSpec<S>) -> Result<(S, S)> {
    if bundle.flavor() != Flavor::ControlFree {
        return Err(Error::InvalidArgument("zero-control cost needs a control-free bundle".into()));
    }
    let grid = bundle.grid();
    let times = grid.nodes();
    let np = bundle.n_paths();
    let last = grid.steps();
    let costs: Vec<S> = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut c = S::zero();
            for n in 0..last {
                let dt = grid.step(n);
                let a = spec.running_cost(times[n], bundle.states[n * np + p]);
                let b = spec.running_cost(times[n + 1], bundle.states[(n + 1) * np + p]);
                c += dt * (a + b) / S::lit(2.0);
            }
            c + spec.terminal_cost(bundle.states[last * np + p])
        })
        .collect();
    let retained: Vec<S> = costs.iter().zip(bundle.exploded()).filter(|(_, &e)| !e).map(|(&c, _)| c).collect();
    if retained.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two retained paths".into()));
    }
    let c = S::from_count(retained.len());
    let mean = retained.iter().copied().sum::<S>() / c;
    let var = retained.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / (c - S::one());
    Ok((mean, (var / c).sqrt()))
}

/// CSV with header `t,mean,var,p4_moment,bound,flag_count`; `bound` is the fourth-moment
/// estimate.
pub fn write_summary_csv<S: Real, W: Write>(
    bundle: &PathBundle<S>,
    spec: &ProblemSpec<S>,
    constants: &ObservedConstants<S>,
    mut out: W,
) -> Result<()> {
    let report = moment_check(bundle, S::lit(4.0), spec, constants)?;
    let flags = bundle.explosion_count();
    writeln!(out, "t,mean,var,p4_moment,bound,flag_count")?;
    for (n, &t) in bundle.grid().nodes().iter().enumerate() {
        let (mean, _, _) = retained_stats(bundle, n, |x| x);
        let (m2, _, _) = retained_stats(bundle, n, |x| x * x);
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            t.as_f64(),
            mean.as_f64(),
            (m2 - mean * mean).as_f64(),
            report.empirical[n].as_f64(),
            report.bound[n].as_f64(),
            flags
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::TimeFn;
    use crate::problem::validate;

    fn benchmark() -> ProblemSpec<f64> {
        ProblemSpec::builder().build().unwrap()
    }

    #[test]
    fn no_noise_no_drift_keeps_paths_constant() {
        let spec = ProblemSpec::<f64>::builder().diffusion(TimeFn::Constant(0.0)).x0(0.7).build().unwrap();
        let zero = |_: f64, _: f64| 0.0;
        let b = simulate(&spec, Flavor::Controlled, Some(&zero), 100, 20, 1).unwrap();
        for n in 0..=20 {
            assert!(b.states(n).iter().all(|&x| x == 0.7));
        }
    }

    #[test]
    fn driftless_paths_have_zero_drift_increments() {
        let spec = ProblemSpec::<f64>::cubic_example(1.0, 1.0, 0.8, 0.0, 0.5).unwrap();
        let b = simulate(&spec, Flavor::Driftless, None, 64, 10, 3).unwrap();
        for n in 0..10 {
            for (p, &dw) in b.increments().step(n).iter().enumerate() {
                let gap = b.states(n + 1)[p] - b.states(n)[p] - 0.8 * dw;
                assert!(gap.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let spec = ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, 0.1).unwrap();
        for flavor in [Flavor::ControlFree, Flavor::Driftless] {
            let a = simulate(&spec, flavor, None, 500, 25, 42).unwrap();
            let b = simulate(&spec, flavor, None, 500, 25, 42).unwrap();
            assert_eq!(a.states, b.states);
            let c = simulate(&spec, flavor, None, 500, 25, 43).unwrap();
            assert_ne!(a.states, c.states);
        }
    }

    #[test]
    fn path_streams_do_not_depend_on_bundle_size() {
        let grid = TimeGrid::<f64>::uniform(1.0, 8).unwrap();
        let small = BrownianIncrements::generate(&grid, 3, 9).unwrap();
        let large = BrownianIncrements::generate(&grid, 50, 9).unwrap();
        for n in 0..8 {
            assert_eq!(small.step(n), &large.step(n)[..3]);
        }
    }

    #[test]
    fn increments_have_step_variance() {
        let grid = TimeGrid::<f64>::uniform(1.0, 4).unwrap();
        let inc = BrownianIncrements::generate(&grid, 40_000, 5).unwrap();
        for n in 0..4 {
            let row = inc.step(n);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 4.0 * (0.25f64 / 40_000.0).sqrt());
            assert!((var - 0.25).abs() < 4.0 * 0.25 * (2.0f64 / 40_000.0).sqrt());
        }
    }

    #[test]
    fn coarsening_sums_increments() {
        let grid = TimeGrid::<f64>::uniform(1.0, 8).unwrap();
        let inc = BrownianIncrements::generate(&grid, 5, 2).unwrap();
        let c = inc.coarsen(4).unwrap();
        assert_eq!(c.grid().steps(), 2);
        for p in 0..5 {
            let direct: f64 = (0..4).map(|n| inc.step(n)[p]).sum();
            assert!((c.step(0)[p] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn moment_example_against_printed_bound() {
        let spec = ProblemSpec::<f64>::builder().x0(0.0).build().unwrap();
        let constants = validate(&spec, 11).unwrap().constants;
        let b = simulate(&spec, Flavor::ControlFree, None, 20_000, 20, 11).unwrap();
        let r = moment_check(&b, 2.0, &spec, &constants).unwrap();
        assert_eq!(r.c_tilde, 0.5);
        assert!(r.passed);
        assert_eq!(r.empirical[0], 0.0);
        assert_eq!(r.bound[0], 1.0);
        for (t, b) in r.times.iter().zip(&r.bound) {
            assert!((b - t.exp()).abs() < 1e-12);
        }
        assert!(moment_check(&b, 1.0, &spec, &constants).is_err());
    }

    #[test]
    fn identical_dynamics_have_zero_deviation() {
        let spec = ProblemSpec::<f64>::builder().control_gain(TimeFn::Constant(0.0)).build().unwrap();
        let constants = validate(&benchmark(), 5).unwrap().constants;
        let u = |_: f64, x: f64| -x;
        let inc = Arc::new(BrownianIncrements::generate(&TimeGrid::uniform(1.0, 10).unwrap(), 200, 4).unwrap());
        let a = simulate_with(&spec, Flavor::Controlled, Some(&u), inc.clone(), &SimConfig::default()).unwrap();
        let b = simulate_with(&spec, Flavor::ControlFree, None, inc, &SimConfig::default()).unwrap();
        let r = deviation_check(&a, &b, &spec, &constants, 1.0).unwrap();
        assert!(r.empirical.iter().all(|&v| v == 0.0));
        assert!(r.passed);
    }

    #[test]
    fn uncoupled_bundles_rejected() {
        let spec = benchmark();
        let constants = validate(&spec, 5).unwrap().constants;
        let a = simulate(&spec, Flavor::ControlFree, None, 10, 5, 1).unwrap();
        let b = simulate(&spec, Flavor::ControlFree, None, 10, 5, 2).unwrap();
        assert!(matches!(deviation_check(&a, &b, &spec, &constants, 1.0), Err(Error::Uncoupled(_))));
    }

    #[test]
    fn superlinear_control_rejected() {
        let spec = benchmark();
        let u = |_: f64, x: f64| -x * x * x;
        assert!(matches!(
            simulate(&spec, Flavor::Controlled, Some(&u), 10, 5, 1),
            Err(Error::ControlGrowth { .. })
        ));
        assert!(simulate(&spec, Flavor::Controlled, None, 10, 5, 1).is_err());
    }

    #[test]
    fn explosions_are_flagged_and_frozen() {
        let spec = ProblemSpec::<f64>::builder()
            .drift_linear(TimeFn::Constant(30.0))
            .x0(1.0)
            .build()
            .unwrap();
        let inc = Arc::new(BrownianIncrements::generate(&TimeGrid::uniform(1.0, 50).unwrap(), 20, 8).unwrap());
        let cfg = SimConfig { explosion_cap: 1e3, ..SimConfig::default() };
        let b = simulate_with(&spec, Flavor::ControlFree, None, inc, &cfg).unwrap();
        assert_eq!(b.explosion_count(), 20);
        assert!(b.states(50).iter().all(|x| x.abs() <= 1e3));
    }

    #[test]
    fn zero_control_cost_of_brownian_motion() {
        // E int_0^1 W_t^2 dt = 1/2 from x0 = 0.
        let spec = ProblemSpec::<f64>::builder().x0(0.0).build().unwrap();
        let b = simulate(&spec, Flavor::ControlFree, None, 40_000, 50, 21).unwrap();
        let (j, se) = zero_control_cost(&b, &spec).unwrap();
        assert!((j - 0.5).abs() < 4.0 * se + 1e-3, "{j} +- {se}");
    }

    #[test]
    fn summary_csv_shape() {
        let spec = benchmark();
        let constants = validate(&spec, 5).unwrap().constants;
        let b = simulate(&spec, Flavor::ControlFree, None, 100, 4, 1).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&b, &spec, &constants, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,mean,var,p4_moment,bound,flag_count"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn single_precision_paths() {
        let spec = ProblemSpec::<f32>::builder().build().unwrap();
        let b = simulate(&spec, Flavor::ControlFree, None, 1000, 10, 3).unwrap();
        assert_eq!(b.states(0)[0], 1.0f32);
        assert!(b.states(10).iter().all(|x| x.is_finite()));
    }
}
