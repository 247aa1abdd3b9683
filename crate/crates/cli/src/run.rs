//! Route execution, cross-checks and artifact writing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::{info, warn};
use pertlq::bsde::{representation_check, solve_bsde_driftless, solve_problem_bsde, BsdeSolution};
use pertlq::hjb::{exp_transform, solve_hjb, ValueSurface};
use pertlq::lqr::LqrSolution;
use pertlq::perturbation::convergence_study;
use pertlq::sde::{simulate, write_summary_csv, Flavor, PathBundle};
use pertlq::{validate, ProblemSpec, TimeGrid, ValidationReport};

use crate::config::{ExperimentConfig, Route, SCHEMA};
use crate::manifest::{
    Check, Manifest, Quantity, RouteRecord, RouteStatus, Tolerance, ToleranceSource, ValidationSummary, Verdict,
    MANIFEST_FILE,
};

pub const VALUE: &str = "value_at_x0";
pub const CONTROL: &str = "control_at_x0";

#[derive(Debug, thiserror::Error)]
#[error("problem validation failed: {0}")]
pub struct ValidationFailed(pub String);

/// Parses the problem and runs the validation probes.
pub fn check_problem(cfg: &ExperimentConfig) -> Result<(ProblemSpec<f64>, ValidationReport<f64>)> {
    let spec = cfg.problem()?;
    let report = validate(&spec, cfg.validation_density).map_err(|e| ValidationFailed(e.to_string()))?;
    Ok((spec, report))
}

enum Artifact {
    Ode(LqrSolution<f64>),
    Hjb(ValueSurface<f64>),
    Fbsde(PathBundle<f64>, BsdeSolution<f64>),
    Driftless,
    Perturbation,
}

#[derive(Default)]
struct Produced {
    outputs: Vec<String>,
    quantities: BTreeMap<String, Quantity>,
    checks: Vec<Check>,
}

impl Produced {
    fn quantity(&mut self, name: &str, q: Quantity) {
        self.quantities.insert(name.to_string(), q);
    }

    fn csv(&mut self, dir: &Path, file: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut out = BufWriter::new(File::create(dir.join(file)).with_context(|| format!("creating {file}"))?);
        write(&mut out)?;
        out.flush()?;
        self.outputs.push(file.to_string());
        Ok(())
    }
}

struct Context_<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a ProblemSpec<f64>,
    report: &'a ValidationReport<f64>,
    dir: &'a Path,
}

fn unperturbed(spec: &ProblemSpec<f64>) -> bool {
    spec.delta == 0.0 || spec.perturbation.is_zero()
}

fn run_ode(cx: &Context_) -> Result<(Produced, Artifact)> {
    let (cfg, spec) = (cx.cfg, cx.spec);
    let sol = LqrSolution::solve(spec, &TimeGrid::uniform(cfg.horizon, cfg.ode_steps)?)?;
    let mut p = Produced::default();
    p.csv(cx.dir, "ode.csv", |w| Ok(sol.write_csv(w)?))?;
    p.quantity(VALUE, Quantity::exact(sol.value(0.0, cfg.x0)));
    p.quantity(CONTROL, Quantity::exact(sol.control(spec, 0.0, cfg.x0)));
    Ok((p, Artifact::Ode(sol)))
}

fn write_surface(surface: &ValueSurface<f64>, spec: &ProblemSpec<f64>, slices: usize, out: &mut impl Write) -> Result<()> {
    let times = surface.tgrid().nodes();
    let last = times.len() - 1;
    let stride = last.div_ceil(slices.max(2) - 1).max(1);
    let mut rows: Vec<usize> = (0..last).step_by(stride).collect();
    rows.push(last);
    writeln!(out, "t,x,V,V_x,u_star")?;
    let xs = surface.xgrid().nodes();
    for n in rows {
        for (i, &x) in xs.iter().enumerate() {
            let g = surface.gradient_at(n, i);
            let u = spec.optimal_control(times[n], g);
            writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", times[n], x, surface.at(n, i), g, u)?;
        }
    }
    Ok(())
}

fn run_hjb(cx: &Context_) -> Result<(Produced, Artifact)> {
    let (cfg, spec) = (cx.cfg, cx.spec);
    let surface = solve_hjb(spec, &cfg.time_grid()?, &cfg.space_grid()?, &cfg.scheme())?;
    let mut p = Produced::default();
    p.csv(cx.dir, "hjb_surface.csv", |w| write_surface(&surface, spec, cfg.surface_slices, w))?;
    p.quantity(VALUE, Quantity::exact(surface.value(0.0, cfg.x0)?));
    p.quantity(CONTROL, Quantity::exact(surface.feedback_control(spec, 0.0, cfg.x0)?));
    p.quantity("unconverged_steps", Quantity::exact(surface.meta.unconverged_steps as f64));
    p.quantity("max_courant", Quantity::exact(surface.meta.max_courant));
    let ts = exp_transform(&surface, spec)?;
    let (lo, hi) = ts.range();
    p.checks.push(Check {
        route: Route::Hjb,
        name: "transform_in_unit_interval".into(),
        passed: ts.violations == 0,
        detail: format!("exp(-H V) spans [{lo:.6e}, {hi:.6e}], {} nodes outside (0, 1]", ts.violations),
    });
    Ok((p, Artifact::Hjb(surface)))
}

fn write_bsde_profile(sol: &BsdeSolution<f64>, out: &mut impl Write) -> Result<()> {
    writeln!(out, "t,mean_Y,sd_Y,mean_Z,sd_Z")?;
    let m = sol.n_paths() as f64;
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / m;
        (mean, (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m).sqrt())
    };
    for (n, &t) in sol.times().iter().enumerate() {
        let (my, sy) = stats(sol.y(n));
        let (mz, sz) = stats(sol.z(n));
        writeln!(out, "{t:.16e},{my:.16e},{sy:.16e},{mz:.16e},{sz:.16e}")?;
    }
    Ok(())
}

fn bsde_quantities(p: &mut Produced, spec: &ProblemSpec<f64>, sol: &BsdeSolution<f64>, bundle: &PathBundle<f64>) {
    p.quantity(VALUE, Quantity::estimate(sol.y0, sol.y0_se));
    p.quantity(CONTROL, Quantity::exact(spec.optimal_control(0.0, sol.z0 / spec.diffusion.eval(0.0))));
    p.quantity("exploded_paths", Quantity::exact(bundle.explosion_count() as f64));
    p.quantity("ridge_steps", Quantity::exact(sol.ridge_steps as f64));
}

fn run_fbsde(cx: &Context_, seed: u64) -> Result<(Produced, Artifact)> {
    let (cfg, spec) = (cx.cfg, cx.spec);
    let bundle = simulate(spec, Flavor::ControlFree, None, cfg.n_paths, cfg.n_steps, seed)?;
    let sol = solve_problem_bsde(&bundle, spec, &cfg.bsde()?)?;
    let mut p = Produced::default();
    p.csv(cx.dir, "fbsde_paths.csv", |w| Ok(write_summary_csv(&bundle, spec, &cx.report.constants, w)?))?;
    p.csv(cx.dir, "fbsde_profile.csv", |w| write_bsde_profile(&sol, w))?;
    bsde_quantities(&mut p, spec, &sol, &bundle);
    Ok((p, Artifact::Fbsde(bundle, sol)))
}

fn run_driftless(cx: &Context_, seed: u64) -> Result<(Produced, Artifact)> {
    let (cfg, spec) = (cx.cfg, cx.spec);
    let bundle = simulate(spec, Flavor::Driftless, None, cfg.n_paths, cfg.n_steps, seed)?;
    let sol = solve_bsde_driftless(&bundle, spec, &cfg.bsde()?)?;
    let mut p = Produced::default();
    p.csv(cx.dir, "fbsde_driftless_profile.csv", |w| write_bsde_profile(&sol, w))?;
    bsde_quantities(&mut p, spec, &sol, &bundle);
    Ok((p, Artifact::Driftless))
}

fn run_perturbation(cx: &Context_) -> Result<(Produced, Artifact)> {
    let (cfg, spec) = (cx.cfg, cx.spec);
    let window = (cfg.window[0], cfg.window[1]);
    let exp = convergence_study(spec, &cfg.deltas, &cfg.time_grid()?, &cfg.space_grid()?, &cfg.scheme(), window)?;
    let mut p = Produced::default();
    p.csv(cx.dir, "study.csv", |w| Ok(exp.write_study_csv(w)?))?;
    if let Some(fit) = &exp.fit {
        p.csv(cx.dir, "k_curves.csv", |w| Ok(fit.write_csv(w)?))?;
        p.quantity("max_fit_residual", Quantity::exact(fit.max_residual()));
    }
    let (v0, v1) = (exp.v0.value(0.0, cfg.x0)?, exp.v1.value(0.0, cfg.x0)?);
    p.quantity(VALUE, Quantity::exact(v0 + spec.delta * v1));
    p.quantity("first_order_at_x0", Quantity::exact(v1));
    for row in &exp.study {
        p.quantity(&format!("sup_u_gap[delta={}]", row.delta), Quantity::exact(row.sup_u_gap));
        p.quantity(&format!("sup_v_residual[delta={}]", row.delta), Quantity::exact(row.sup_v_residual));
        if let Some(r) = row.ratio {
            p.quantity(&format!("residual_ratio[delta={}]", row.delta), Quantity::exact(r));
        }
    }
    // deltas are listed largest first; the control gap should shrink along the list
    let mut sorted = exp.study.clone();
    sorted.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let gaps: Vec<f64> = sorted.iter().map(|r| r.sup_u_gap).collect();
    p.checks.push(Check {
        route: Route::Perturbation,
        name: "u_gap_monotone".into(),
        passed: gaps.windows(2).all(|w| w[1] < w[0]),
        detail: format!("sup |u^delta - u^0| by decreasing delta: {gaps:?}"),
    });
    Ok((p, Artifact::Perturbation))
}

fn execute(route: Route, cx: &Context_) -> (RouteRecord, Vec<Check>, Option<Artifact>) {
    if route == Route::Ode && !unperturbed(cx.spec) {
        info!("route {route}: skipped");
        return (RouteRecord::skipped(route, "the Riccati route solves the unperturbed problem only"), Vec::new(), None);
    }
    info!("route {route}: start");
    let start = Instant::now();
    let seed = cx.cfg.seed.unwrap_or(0);
    let result = match route {
        Route::Ode => run_ode(cx),
        Route::Hjb => run_hjb(cx),
        Route::Fbsde => run_fbsde(cx, seed),
        // an independent stream keeps the two Monte Carlo estimates uncorrelated
        Route::FbsdeDriftless => run_driftless(cx, seed.wrapping_add(1)),
        Route::Perturbation => run_perturbation(cx),
    };
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((p, artifact)) => {
            info!("route {route}: ok in {seconds:.2} s");
            let record = RouteRecord {
                route,
                status: RouteStatus::Ok,
                seconds,
                outputs: p.outputs,
                quantities: p.quantities,
                error: None,
            };
            (record, p.checks, Some(artifact))
        }
        Err(e) => {
            warn!("route {route}: failed: {e:#}");
            let record = RouteRecord {
                route,
                status: RouteStatus::Failed,
                seconds,
                outputs: Vec::new(),
                quantities: BTreeMap::new(),
                error: Some(format!("{e:#}")),
            };
            (record, Vec::new(), None)
        }
    }
}

fn cross_check(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec<f64>,
    dir: &Path,
    manifest: &mut Manifest,
    artifacts: &BTreeMap<Route, Artifact>,
) -> Result<()> {
    use Route::*;
    let both = |a: Route, b: Route| artifacts.contains_key(&a) && artifacts.contains_key(&b);
    let unperturbed = unperturbed(spec);
    let mut verdicts = Vec::new();

    if both(Ode, Hjb) && unperturbed {
        verdicts.push(manifest.compare(Ode, Hjb, VALUE, Tolerance::Absolute(cfg.tol_abs)));
        if let (Some(Artifact::Ode(lqr)), Some(Artifact::Hjb(surface))) = (artifacts.get(&Ode), artifacts.get(&Hjb)) {
            let gap = surface.sup_error(cfg.window[0], cfg.window[1], |t, x| lqr.value(t, x));
            verdicts.push(Verdict::from_gap(Ode, Hjb, "sup_value_gap", gap, cfg.tol_abs, ToleranceSource::Absolute));
        }
    }
    if both(Fbsde, Ode) && unperturbed {
        verdicts.push(manifest.compare(Fbsde, Ode, VALUE, Tolerance::Se(cfg.se_factor)));
    }
    if both(Fbsde, Hjb) {
        verdicts.push(manifest.compare(Fbsde, Hjb, VALUE, Tolerance::RelativeOrSe(cfg.tol_rel, cfg.se_factor)));
    }
    if both(FbsdeDriftless, Hjb) {
        verdicts.push(manifest.compare(FbsdeDriftless, Hjb, VALUE, Tolerance::RelativeOrSe(cfg.tol_rel, cfg.se_factor)));
    }
    if both(Fbsde, FbsdeDriftless) {
        verdicts.push(manifest.compare(Fbsde, FbsdeDriftless, VALUE, Tolerance::Se(cfg.se_factor)));
    }
    if both(Perturbation, Hjb) {
        let tol = if unperturbed { cfg.tol_abs } else { cfg.expansion_factor * spec.delta * spec.delta };
        verdicts.push(manifest.compare(Perturbation, Hjb, VALUE, Tolerance::Absolute(tol)));
    }

    if let (Some(Artifact::Fbsde(bundle, sol)), Some(Artifact::Hjb(surface))) = (artifacts.get(&Fbsde), artifacts.get(&Hjb)) {
        let report = representation_check(sol, bundle, surface, spec)?;
        let file = "representation.csv";
        let mut out = BufWriter::new(File::create(dir.join(file))?);
        report.write_csv(&mut out)?;
        out.flush()?;
        if let Some(rec) = manifest.routes.iter_mut().find(|r| r.route == Fbsde) {
            rec.outputs.push(file.into());
            rec.quantities.insert("rms_y_gap_max".into(), Quantity::exact(report.max_rms_y()));
            rec.quantities.insert("rms_z_gap_max".into(), Quantity::exact(report.max_rms_z()));
        }
        manifest.checks.push(Check {
            route: Fbsde,
            name: "representation_transform".into(),
            passed: report.transform_violations == 0,
            detail: format!("{} transformed values outside (0, 1] along the paths", report.transform_violations),
        });
    }
    manifest.verdicts = verdicts;
    Ok(())
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Validates, runs every requested route and writes the manifest last.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.check()?;
    let (spec, report) = check_problem(cfg)?;
    if !report.passed() {
        let failed: Vec<String> = report.failures().map(|c| format!("{}: {}", c.clause, c.detail)).collect();
        return Err(ValidationFailed(failed.join("; ")).into());
    }
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stale = dir.join(MANIFEST_FILE);
    if stale.exists() {
        std::fs::remove_file(&stale)?;
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let cx = Context_ { cfg, spec: &spec, report: &report, dir: &dir };
    let results: Vec<_> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg.routes.iter().map(|&r| s.spawn({
                let cx = &cx;
                move || execute(r, cx)
            })).collect();
            handles.into_iter().map(|h| h.join().expect("route thread panicked")).collect()
        })
    } else {
        cfg.routes.iter().map(|&r| execute(r, &cx)).collect()
    };

    let mut manifest = Manifest {
        schema: SCHEMA,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        name: cfg.name.clone(),
        config_hash: cfg.hash()?,
        validation: ValidationSummary::from(&report),
        routes: Vec::new(),
        verdicts: Vec::new(),
        checks: Vec::new(),
        all_passed: false,
    };
    let mut artifacts = BTreeMap::new();
    for (record, checks, artifact) in results {
        if let Some(a) = artifact {
            artifacts.insert(record.route, a);
        }
        manifest.checks.extend(checks);
        manifest.routes.push(record);
    }
    if let Err(e) = cross_check(cfg, &spec, &dir, &mut manifest, &artifacts) {
        manifest.checks.push(Check {
            route: Route::Fbsde,
            name: "cross_check".into(),
            passed: false,
            detail: format!("{e:#}"),
        });
    }
    manifest.settle();
    manifest.write(&dir)?;
    Ok(RunOutcome { dir, manifest })
}

/// Runs one copy of `base` per value of `param`, each in its own subdirectory, and
/// tabulates the headline value of every route.
pub fn sweep(base: &ExperimentConfig, param: &str, values: &[f64]) -> Result<(PathBuf, Vec<(f64, Manifest)>)> {
    let root = base.output_dir.clone().unwrap_or_else(|| base.name.clone());
    let mut runs = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        cfg.set_param(param, v)?;
        cfg.output_dir = Some(Path::new(&root).join(format!("{param}_{v}")).to_string_lossy().into_owned());
        info!("sweep {param} = {v}");
        runs.push((v, run(&cfg)?.manifest));
    }
    let mut dir_cfg = base.clone();
    dir_cfg.output_dir = Some(root);
    let dir = dir_cfg.output_dir();
    let mut out = BufWriter::new(File::create(dir.join("sweep.csv"))?);
    writeln!(out, "{param},route,status,value,se,all_passed")?;
    for (v, m) in &runs {
        for r in &m.routes {
            let q = r.quantities.get(VALUE);
            let fmt = |x: Option<f64>| x.map(|x| format!("{x:.16e}")).unwrap_or_default();
            let status = serde_json::to_value(r.status)?;
            writeln!(
                out,
                "{v:.16e},{},{},{},{},{}",
                r.route,
                status.as_str().unwrap_or_default(),
                fmt(q.map(|q| q.value)),
                fmt(q.and_then(|q| q.se)),
                m.all_passed
            )?;
        }
    }
    out.flush()?;
    Ok((dir, runs))
}
