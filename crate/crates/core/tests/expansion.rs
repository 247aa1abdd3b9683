use pertlq::hjb::{solve_hjb, SchemeConfig};
use pertlq::perturbation::{convergence_study, fit_quartic, CorrectionForm, ExpansionResult, DELTAS, WINDOW};
use pertlq::{ProblemSpec, SpaceGrid, TimeGrid};

fn example(delta: f64) -> ProblemSpec<f64> {
    ProblemSpec::cubic_example(1.0, 1.0, 1.0, 0.0, delta).unwrap()
}

fn grids() -> (TimeGrid<f64>, SpaceGrid<f64>) {
    (TimeGrid::uniform(1.0, 1000).unwrap(), SpaceGrid::new(-6.0, 6.0, 401).unwrap())
}

/// With `V0 = lambda(t) x^2 + ln cosh(1 - t)`, `lambda = tanh(1 - t)`, the correction is
/// `a x^4 + b x^2 + c` with
/// `a' = 4 lambda a + 2 lambda`, `b' = 2 lambda b - 6 a`, `c' = -b`, all zero at `t = 1`.
fn quartic_moments(t_end: f64, steps: usize) -> Vec<[f64; 3]> {
    let rhs = |t: f64, y: [f64; 3]| {
        let l = (1.0 - t).tanh();
        [4.0 * l * y[0] + 2.0 * l, 2.0 * l * y[1] - 6.0 * y[0], -y[1]]
    };
    let h = -t_end / steps as f64;
    let mut y = [0.0; 3];
    let mut out = vec![y];
    let mut t = t_end;
    let add = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for _ in 0..steps {
        let k1 = rhs(t, y);
        let k2 = rhs(t + h / 2.0, add(y, k1, h / 2.0));
        let k3 = rhs(t + h / 2.0, add(y, k2, h / 2.0));
        let k4 = rhs(t + h, add(y, k3, h));
        for i in 0..3 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        out.push(y);
    }
    out.reverse();
    out
}

#[test]
fn correction_matches_moment_equations() {
    let (tg, xg) = grids();
    let e = ExpansionResult::compute(&example(0.05), &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
    let moments = quartic_moments(1.0, 1000);
    let mut sup = 0.0f64;
    for n in (0..=1000).step_by(50) {
        let [a, b, c] = moments[n];
        for i in xg.indices_within(-2.0, 2.0) {
            let x = xg.node(i);
            sup = sup.max((e.v1.at(n, i) - (a * x.powi(4) + b * x * x + c)).abs());
        }
    }
    assert!(sup < 2e-3, "sup gap {sup}");

    let fit = e.fit.as_ref().unwrap();
    let [a, b, c] = moments[0];
    assert!((2.0 * fit.k1[0] - a).abs() < 2e-3 * a.abs());
    assert!((2.0 * fit.k2[0] - b).abs() < 2e-3 * b.abs());
    assert!((fit.k0[0] - c).abs() < 2e-3 * c.abs());
}

#[test]
fn correction_matches_centered_difference_of_full_solves() {
    let (tg, xg) = grids();
    let scheme = SchemeConfig::default();
    let e = ExpansionResult::compute(&example(0.01), &tg, &xg, &scheme, WINDOW).unwrap();
    let gap = |d: f64, w: f64| {
        let up = solve_hjb(&example(d), &tg, &xg, &scheme).unwrap();
        let down = solve_hjb(&example(-d), &tg, &xg, &scheme).unwrap();
        let mut sup = 0.0f64;
        for n in 0..tg.len() {
            for i in xg.indices_within(-w, w) {
                let fd = (up.at(n, i) - down.at(n, i)) / (2.0 * d);
                sup = sup.max((fd - e.v1.at(n, i)).abs());
            }
        }
        sup
    };
    let inner = gap(0.01, 1.5);
    assert!(inner <= 5e-3, "sup gap {inner}");
    // what remains is the difference quotient's own delta^2 term
    let ratio = gap(0.01, 2.0) / gap(0.002, 2.0);
    assert!((ratio - 25.0).abs() < 1.0, "ratio {ratio}");
}

#[test]
fn quartic_form_fits_well_with_constant() {
    let (tg, xg) = grids();
    let e = ExpansionResult::compute(&example(0.05), &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
    let fit = e.fit.unwrap();
    let last = fit.times.len() - 1;
    assert_eq!(fit.k1[last], 0.0);
    assert_eq!(fit.k2[last], 0.0);
    assert!(fit.residual[..last].iter().all(|&r| r <= 0.01), "max residual {}", fit.max_residual());

    // without the constant the form cannot absorb the x-independent part of V1
    let bare = fit_quartic(&e.v1, -2.0, 2.0, false).unwrap();
    assert!(bare.residual[0] > 0.01);
}

#[test]
fn fitted_curves_settle_under_refinement() {
    let xg = SpaceGrid::new(-6.0, 6.0, 201).unwrap();
    let jump = |m: usize| {
        let tg = TimeGrid::uniform(1.0, m).unwrap();
        let e = ExpansionResult::compute(&example(0.05), &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
        let f = e.fit.unwrap();
        f.k1.windows(2).chain(f.k2.windows(2)).map(|w| (w[1] - w[0]).abs()).fold(0.0f64, f64::max)
    };
    let (coarse, fine) = (jump(100), jump(200));
    assert!(fine < 0.6 * coarse, "{coarse} -> {fine}");
}

#[test]
fn expanded_control_tracks_full_solve() {
    let (tg, xg) = grids();
    let scheme = SchemeConfig::default();
    let spec = example(0.05);
    let e = ExpansionResult::compute(&spec, &tg, &xg, &scheme, WINDOW).unwrap();
    let full = solve_hjb(&spec, &tg, &xg, &scheme).unwrap();
    let u_full = full.feedback_control(&spec, 0.0, 1.0).unwrap();
    let u_exp = e.control_correction(&spec, 0.05, 0.0, 1.0, CorrectionForm::Surface).unwrap();
    assert!((u_full - u_exp).abs() <= 10.0 * 0.05 * 0.05, "{u_full} vs {u_exp}");

    let d_fit = e.correction_discrepancy(&spec, 0.05, CorrectionForm::FitDerivative).unwrap();
    let d_printed = e.correction_discrepancy(&spec, 0.05, CorrectionForm::Printed).unwrap();
    assert!(d_fit < 0.01);
    assert!(d_printed > d_fit);
}

#[test]
fn expansion_residual_is_second_order() {
    let (tg, xg) = grids();
    let deltas: Vec<f64> = DELTAS.to_vec();
    let e = convergence_study(&example(0.0), &deltas, &tg, &xg, &SchemeConfig::default(), WINDOW).unwrap();
    let ratio = e.study[2].ratio.unwrap();
    assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    for w in e.study.windows(2) {
        assert!(w[1].sup_u_gap < w[0].sup_u_gap);
    }
}

#[test]
fn perturbed_surfaces_are_even() {
    let tg = TimeGrid::uniform(1.0, 200).unwrap();
    let xg = SpaceGrid::new(-6.0, 6.0, 161).unwrap();
    let spec = example(0.1);
    let v = solve_hjb(&spec, &tg, &xg, &SchemeConfig::default()).unwrap();
    let nx = xg.len();
    for n in [0, 100, 199] {
        for i in 0..nx {
            let (a, b) = (v.at(n, i), v.at(n, nx - 1 - i));
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            let x = xg.node(i);
            if x.abs() < 5.0 {
                let t = tg.nodes()[n];
                let (u, w) = (v.feedback_control(&spec, t, x).unwrap(), v.feedback_control(&spec, t, -x).unwrap());
                assert!((u + w).abs() <= 1e-9 * (1.0 + u.abs()));
            }
        }
    }
}
