//! First-order expansion in the perturbation strength.
//!
//! `V^delta = V0 + delta V1 + O(delta^2)`, where `V1` solves the equation obtained by
//! substituting the expansion into the HJB equation and keeping the `O(delta)` terms (see
//! [`solve_linearized`]). For the centered cubic example `V1` is fitted per time slice to
//! `2 (K1 x^4 + K2 x^2) + K0`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::hjb::{solve_hjb, solve_linearized, SchemeConfig, ValueSurface};
use crate::problem::ProblemSpec;
use crate::real::Real;

/// Default compact window `Q`.
pub const WINDOW: (f64, f64) = (-2.0, 2.0);

/// Default sequence of perturbation strengths for the convergence study.
pub const DELTAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Solves for `V1` given the unperturbed surface `v0` (solved at `delta = 0`).
pub fn first_order_correction<S: Real>(
    spec: &ProblemSpec<S>,
    v0: &ValueSurface<S>,
    scheme: &SchemeConfig<S>,
) -> Result<ValueSurface<S>> {
    solve_linearized(spec, v0, scheme)
}

/// Per-slice coefficients of `V1(s, x) ~ 2 (K1(s) x^4 + K2(s) x^2) + K0(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticFit<S> {
    pub times: Vec<S>,
    pub k1: Vec<S>,
    pub k2: Vec<S>,
    /// Zero when the fit was run without the constant term.
    pub k0: Vec<S>,
    /// Relative RMS residual `|V1 - fit| / |V1|` over the window; 0 for a zero slice.
    pub residual: Vec<S>,
    pub window: (S, S),
    pub with_constant: bool,
}

impl<S: Real> QuarticFit<S> {
    fn interp(&self, v: &[S], t: S) -> S {
        let n = self.times.len();
        if t <= self.times[0] {
            return v[0];
        }
        if t >= self.times[n - 1] {
            return v[n - 1];
        }
        let j = self.times.partition_point(|&s| s <= t).min(n - 1);
        let w = (t - self.times[j - 1]) / (self.times[j] - self.times[j - 1]);
        v[j - 1] + w * (v[j] - v[j - 1])
    }

    pub fn k1_at(&self, t: S) -> S {
        self.interp(&self.k1, t)
    }

    pub fn k2_at(&self, t: S) -> S {
        self.interp(&self.k2, t)
    }

    pub fn k0_at(&self, t: S) -> S {
        self.interp(&self.k0, t)
    }

    pub fn eval(&self, t: S, x: S) -> S {
        let x2 = x * x;
        S::lit(2.0) * (self.k1_at(t) * x2 * x2 + self.k2_at(t) * x2) + self.k0_at(t)
    }

    /// x-derivative of the fitted form.
    pub fn derivative(&self, t: S, x: S) -> S {
        S::lit(8.0) * self.k1_at(t) * x * x * x + S::lit(4.0) * self.k2_at(t) * x
    }

    pub fn max_residual(&self) -> S {
        self.residual.iter().fold(S::zero(), |a, &b| a.max(b))
    }

    /// CSV with header `s,K1,K2,fit_residual`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "s,K1,K2,fit_residual")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i].as_f64(),
                self.k1[i].as_f64(),
                self.k2[i].as_f64(),
                self.residual[i].as_f64()
            )?;
        }
        Ok(())
    }
}

/// Least-squares fit of every slice of `v1` over the nodes in `[lo, hi]`.
pub fn fit_quartic<S: Real>(v1: &ValueSurface<S>, lo: S, hi: S, with_constant: bool) -> Result<QuarticFit<S>> {
    let idx = v1.xgrid().indices_within(lo, hi);
    if idx.len() < 5 {
        return Err(Error::InvalidArgument(format!("fit window [{lo}, {hi}] holds {} nodes, need at least 5", idx.len())));
    }
    let xs: Vec<S> = idx.iter().map(|&i| v1.xgrid().node(i)).collect();
    let two = S::lit(2.0);
    let basis = |x: S| [two * x.powi(4), two * x * x, S::one()];
    let p = if with_constant { 3 } else { 2 };
    let mut gram = [[S::zero(); 3]; 3];
    for &x in &xs {
        let b = basis(x);
        for r in 0..p {
            for c in 0..p {
                gram[r][c] += b[r] * b[c];
            }
        }
    }
    let times = v1.tgrid().nodes().to_vec();
    let mut fit = QuarticFit {
        times: times.clone(),
        k1: Vec::with_capacity(times.len()),
        k2: Vec::with_capacity(times.len()),
        k0: Vec::with_capacity(times.len()),
        residual: Vec::with_capacity(times.len()),
        window: (lo, hi),
        with_constant,
    };
    for n in 0..times.len() {
        let row = v1.slice(n);
        let mut rhs = [S::zero(); 3];
        for (&i, &x) in idx.iter().zip(&xs) {
            let b = basis(x);
            for r in 0..p {
                rhs[r] += b[r] * row[i];
            }
        }
        let c = solve_small(gram, rhs, p)?;
        let (mut num, mut den) = (S::zero(), S::zero());
        for (&i, &x) in idx.iter().zip(&xs) {
            let b = basis(x);
            let f = c[0] * b[0] + c[1] * b[1] + c[2] * b[2];
            num += (row[i] - f) * (row[i] - f);
            den += row[i] * row[i];
        }
        fit.k1.push(c[0]);
        fit.k2.push(c[1]);
        fit.k0.push(c[2]);
        fit.residual.push(if den > S::zero() { (num / den).sqrt() } else { S::zero() });
    }
    Ok(fit)
}

/// Gaussian elimination with partial pivoting on the leading `p x p` block.
#[allow(clippy::needless_range_loop)]
fn solve_small<S: Real>(mut a: [[S; 3]; 3], mut b: [S; 3], p: usize) -> Result<[S; 3]> {
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        if !(a[piv][col].abs() > S::epsilon()) {
            return Err(Error::Regression("singular quartic fit".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..p {
            let f = a[r][col] / a[col][col];
            for c in col..p {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    let mut x = [S::zero(); 3];
    for r in (0..p).rev() {
        let mut s = b[r];
        for c in (r + 1)..p {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Ok(x)
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyRow<S> {
    pub delta: S,
    /// `sup |u^delta - u^0|` over the time grid and the window.
    pub sup_u_gap: S,
    /// `sup |V^delta - V0 - delta V1|` over the time grid and the window.
    pub sup_v_residual: S,
    /// Residual of the previous row divided by this one; `None` on the first row.
    pub ratio: Option<S>,
}

#[derive(Debug, Clone)]
pub struct ExpansionResult<S> {
    pub v0: ValueSurface<S>,
    pub v1: ValueSurface<S>,
    /// Present when the target is identically zero.
    pub fit: Option<QuarticFit<S>>,
    pub study: Vec<StudyRow<S>>,
}

/// How the control correction is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionForm {
    /// `u0 - B / (2k) delta V1_x` with `V1_x` from the correction surface.
    Surface,
    /// Same, with `V1_x` replaced by the derivative of the quartic fit.
    FitDerivative,
    /// `u0 - 2 delta (4 K1 x^3 + 2 K2 x^3)`, taken literally.
    Printed,
}

impl<S: Real> ExpansionResult<S> {
    /// Solves `V0` and `V1` on the given grids; fits the quartic form when the target is zero.
    pub fn compute(
        spec: &ProblemSpec<S>,
        tgrid: &TimeGrid<S>,
        xgrid: &SpaceGrid<S>,
        scheme: &SchemeConfig<S>,
        window: (S, S),
    ) -> Result<Self> {
        let base = spec.with_delta(S::zero());
        let v0 = solve_hjb(&base, tgrid, xgrid, scheme)?;
        let v1 = first_order_correction(spec, &v0, scheme)?;
        let centered = tgrid.nodes().iter().all(|&t| spec.target.eval(t) == S::zero());
        let fit = if centered { Some(fit_quartic(&v1, window.0, window.1, true)?) } else { None };
        Ok(Self { v0, v1, fit, study: Vec::new() })
    }

    /// `V0 + delta V1` at a node.
    pub fn expanded_at(&self, delta: S, n: usize, i: usize) -> S {
        self.v0.at(n, i) + delta * self.v1.at(n, i)
    }

    /// Approximate optimal control at strength `delta`.
    pub fn control_correction(&self, spec: &ProblemSpec<S>, delta: S, t: S, x: S, form: CorrectionForm) -> Result<S> {
        let g0 = self.v0.gradient(t, x)?;
        let u0 = spec.optimal_control(t, g0);
        let fit = || self.fit.as_ref().ok_or_else(|| Error::InvalidArgument("no quartic fit for an uncentered problem".into()));
        match form {
            CorrectionForm::Surface => Ok(spec.optimal_control(t, g0 + delta * self.v1.gradient(t, x)?)),
            CorrectionForm::FitDerivative => Ok(spec.optimal_control(t, g0 + delta * fit()?.derivative(t, x))),
            CorrectionForm::Printed => {
                let f = fit()?;
                let x3 = x * x * x;
                Ok(u0 - S::lit(2.0) * delta * (S::lit(4.0) * f.k1_at(t) * x3 + S::lit(2.0) * f.k2_at(t) * x3))
            }
        }
    }

    /// Sup over grid nodes in the window of `|form - Surface|` at strength `delta`.
    pub fn correction_discrepancy(&self, spec: &ProblemSpec<S>, delta: S, form: CorrectionForm) -> Result<S> {
        let (lo, hi) = self.fit.as_ref().map(|f| f.window).unwrap_or((S::lit(WINDOW.0), S::lit(WINDOW.1)));
        let xg = self.v1.xgrid();
        let mut sup = S::zero();
        for &t in self.v1.tgrid().nodes() {
            for i in xg.indices_within(lo, hi) {
                let x = xg.node(i);
                let a = self.control_correction(spec, delta, t, x, form)?;
                let b = self.control_correction(spec, delta, t, x, CorrectionForm::Surface)?;
                sup = sup.max((a - b).abs());
            }
        }
        Ok(sup)
    }

    /// CSV with header `delta,sup_u_gap,sup_V_residual,ratio`.
    pub fn write_study_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "delta,sup_u_gap,sup_V_residual,ratio")?;
        for r in &self.study {
            let ratio = r.ratio.map(|v| format!("{:.16e}", v.as_f64())).unwrap_or_default();
            writeln!(out, "{:.16e},{:.16e},{:.16e},{ratio}", r.delta.as_f64(), r.sup_u_gap.as_f64(), r.sup_v_residual.as_f64())?;
        }
        Ok(())
    }
}

/// Solves the full problem at every strength in `deltas` (in parallel) and tabulates the
/// control gap and the expansion residual over `[0, T] x window`.
pub fn convergence_study<S: Real>(
    spec: &ProblemSpec<S>,
    deltas: &[S],
    tgrid: &TimeGrid<S>,
    xgrid: &SpaceGrid<S>,
    scheme: &SchemeConfig<S>,
    window: (S, S),
) -> Result<ExpansionResult<S>> {
    if deltas.iter().any(|d| !(d.is_finite() && *d >= S::zero())) {
        return Err(Error::InvalidArgument("perturbation strengths must be finite and non-negative".into()));
    }
    let mut exp = ExpansionResult::compute(spec, tgrid, xgrid, scheme, window)?;
    let surfaces: Vec<ValueSurface<S>> =
        deltas.par_iter().map(|&d| solve_hjb(&spec.with_delta(d), tgrid, xgrid, scheme)).collect::<Result<_>>()?;
    let idx = xgrid.indices_within(window.0, window.1);
    let times = tgrid.nodes();
    let mut prev: Option<S> = None;
    for (&delta, vd) in deltas.iter().zip(&surfaces) {
        let mut u_gap = S::zero();
        let mut v_res = S::zero();
        for (n, &t) in times.iter().enumerate() {
            for &i in &idx {
                let du = spec.optimal_control(t, vd.gradient_at(n, i)) - spec.optimal_control(t, exp.v0.gradient_at(n, i));
                u_gap = u_gap.max(du.abs());
                v_res = v_res.max((vd.at(n, i) - exp.expanded_at(delta, n, i)).abs());
            }
        }
        exp.study.push(StudyRow { delta, sup_u_gap: u_gap, sup_v_residual: v_res, ratio: prev.map(|p| p / v_res) });
        prev = Some(v_res);
    }
    Ok(exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::Perturbation;

    fn grids(nx: usize, nt: usize) -> (TimeGrid<f64>, SpaceGrid<f64>) {
        (TimeGrid::uniform(1.0, nt).unwrap(), SpaceGrid::new(-6.0, 6.0, nx).unwrap())
    }

    fn example(delta: f64) -> ProblemSpec<f64> {
        ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, delta).unwrap()
    }

    #[test]
    fn no_perturbation_gives_zero_correction() {
        let spec = ProblemSpec::<f64>::builder().perturbation(Perturbation::Zero).delta(0.3).build().unwrap();
        let (tg, xg) = grids(101, 200);
        let e = ExpansionResult::compute(&spec, &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        assert!(e.v1.values().iter().all(|&v| v == 0.0));
        let fit = e.fit.unwrap();
        assert!(fit.k1.iter().chain(&fit.k2).chain(&fit.residual).all(|&v| v == 0.0));
    }

    #[test]
    fn correction_is_even_and_nonpositive() {
        let (tg, xg) = grids(121, 300);
        let e = ExpansionResult::compute(&example(0.1), &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        let nx = xg.len();
        for n in 0..tg.len() {
            let row = e.v1.slice(n);
            for i in 0..nx {
                assert!((row[i] - row[nx - 1 - i]).abs() < 1e-10 * (1.0 + row[i].abs()));
                if n < tg.steps() {
                    assert!(row[i] <= 1e-12, "V1 = {} at n = {n}, i = {i}", row[i]);
                }
            }
        }
        assert!(e.v1.slice(tg.steps()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_injected_quartic() {
        let (tg, xg) = grids(81, 10);
        let v = ValueSurface::from_fn(tg, xg, |t, x| 2.0 * ((0.3 - t) * x.powi(4) + (t * t - 1.5) * x * x));
        let fit = fit_quartic(&v, -2.0, 2.0, false).unwrap();
        for (i, &t) in fit.times.iter().enumerate() {
            assert!((fit.k1[i] - (0.3 - t)).abs() < 1e-12);
            assert!((fit.k2[i] - (t * t - 1.5)).abs() < 1e-12);
        }
        assert!(fit.max_residual() < 1e-12);
    }

    #[test]
    fn narrow_window_rejected() {
        let (tg, xg) = grids(81, 10);
        let v = ValueSurface::from_fn(tg, xg, |_, _| 0.0);
        assert!(fit_quartic(&v, -0.2, 0.2, true).is_err());
    }

    #[test]
    fn zero_strength_control_matches_unperturbed() {
        let spec = example(0.05);
        let (tg, xg) = grids(121, 200);
        let e = ExpansionResult::compute(&spec, &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        for form in [CorrectionForm::Surface, CorrectionForm::FitDerivative, CorrectionForm::Printed] {
            let a = e.control_correction(&spec, 0.0, 0.3, 0.7, form).unwrap();
            let b = spec.optimal_control(0.3, e.v0.gradient(0.3, 0.7).unwrap());
            assert_eq!(a, b);
            let c = e.control_correction(&spec, 0.05, 0.3, 0.0, form).unwrap();
            assert!(c.abs() < 1e-12);
        }
        assert!(e.control_correction(&spec, 0.05, 0.3, 9.0, CorrectionForm::Surface).is_err());
    }

    #[test]
    fn zero_row_has_zero_gaps() {
        let (tg, xg) = grids(81, 100);
        let e = convergence_study(&example(0.1), &[0.1, 0.0], &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        assert_eq!(e.study[1].sup_u_gap, 0.0);
        assert_eq!(e.study[1].sup_v_residual, 0.0);
        assert!(e.study[0].ratio.is_none());
    }

    #[test]
    fn csv_headers() {
        let (tg, xg) = grids(61, 20);
        let e = convergence_study(&example(0.1), &[0.1, 0.05], &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        let mut buf = Vec::new();
        e.write_study_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("delta,sup_u_gap,sup_V_residual,ratio\n"));
        assert_eq!(text.lines().count(), 3);
        let mut buf = Vec::new();
        e.fit.unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,K1,K2,fit_residual\n"));
        assert_eq!(text.lines().count(), 22);
    }
}
