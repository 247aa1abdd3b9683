use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bundled(name: &str) -> toml::Table {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    std::fs::read_to_string(path).unwrap().parse().unwrap()
}

/// Shrinks the grids and the path count so a run takes a second or two.
fn small(mut t: toml::Table) -> toml::Table {
    for (k, v) in [("x_nodes", 201), ("t_steps", 400), ("ode_steps", 400), ("n_paths", 4000), ("n_steps", 20), ("bootstrap", 5)] {
        t.insert(k.into(), toml::Value::Integer(v));
    }
    t
}

struct Sandbox {
    root: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self { root: tempfile::tempdir().unwrap() }
    }

    fn write(&self, name: &str, cfg: &toml::Table) -> PathBuf {
        let path = self.root.path().join(name);
        std::fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
        path
    }

    fn pertlq(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pertlq"))
            .args(args)
            .env("PLQ_OUTPUT_ROOT", self.root.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn run(&self, cfg: &toml::Table) -> (Output, PathBuf) {
        let name = cfg["name"].as_str().unwrap().to_string();
        let path = self.write(&format!("{name}.toml"), cfg);
        let out = self.pertlq(&["run", path.to_str().unwrap()]);
        (out, self.root.path().join(name))
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn verdict<'a>(m: &'a Value, a: &str, b: &str, q: &str) -> &'a Value {
    m["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["route_a"] == a && v["route_b"] == b && v["quantity"] == q)
        .unwrap_or_else(|| panic!("no verdict {a} vs {b} on {q}"))
}

fn strip_timing(mut m: Value) -> Value {
    for r in m["routes"].as_array_mut().unwrap() {
        r.as_object_mut().unwrap().remove("seconds");
    }
    m
}

#[test]
fn benchmark_routes_agree() {
    let sb = Sandbox::new();
    let (out, dir) = sb.run(&small(bundled("lqr_constant.toml")));
    assert!(out.status.success(), "{}", stdout(&out));
    let m = manifest(&dir);
    let routes: Vec<&str> = m["routes"].as_array().unwrap().iter().map(|r| r["route"].as_str().unwrap()).collect();
    assert_eq!(routes, ["ode", "hjb", "fbsde", "fbsde_driftless"]);
    assert!(m["routes"].as_array().unwrap().iter().all(|r| r["status"] == "ok"));

    let sup = verdict(&m, "ode", "hjb", "sup_value_gap");
    assert!(sup["gap"].as_f64().unwrap() <= 1e-3);
    let mc = verdict(&m, "fbsde", "ode", "value_at_x0");
    assert_eq!(mc["source"], "se");
    assert_eq!(mc["status"], "pass");
    assert_eq!(verdict(&m, "fbsde", "fbsde_driftless", "value_at_x0")["status"], "pass");
    assert_eq!(m["all_passed"], true);

    let exact = 1f64.tanh() + 1f64.cosh().ln();
    let ode = m["routes"][0]["quantities"]["value_at_x0"]["value"].as_f64().unwrap();
    assert!((ode - exact).abs() < 1e-8);
    for f in ["ode.csv", "hjb_surface.csv", "fbsde_paths.csv", "fbsde_profile.csv", "representation.csv", "config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_differ_only_in_timing() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("lqr_constant.toml"));
    cfg.insert("routes".into(), toml::Value::try_from(["hjb", "fbsde"]).unwrap());
    cfg.insert("name".into(), "first".into());
    let (_, a) = sb.run(&cfg);
    cfg.insert("name".into(), "second".into());
    cfg.insert("output_dir".into(), "second".into());
    let (_, b) = sb.run(&cfg);
    let (mut ma, mut mb) = (strip_timing(manifest(&a)), strip_timing(manifest(&b)));
    // the name is part of the config, so the hash differs too
    for m in [&mut ma, &mut mb] {
        let o = m.as_object_mut().unwrap();
        o.remove("name");
        o.remove("config_hash");
    }
    assert_eq!(ma, mb);
    for f in ["hjb_surface.csv", "fbsde_profile.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn parallel_routes_match_sequential() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("lqr_constant.toml"));
    cfg.insert("name".into(), "seq".into());
    let (_, a) = sb.run(&cfg);
    cfg.insert("name".into(), "par".into());
    cfg.insert("parallel".into(), true.into());
    let (_, b) = sb.run(&cfg);
    assert_eq!(strip_timing(manifest(&a))["routes"], strip_timing(manifest(&b))["routes"]);
}

#[test]
fn cubic_study_is_monotone() {
    let sb = Sandbox::new();
    let (out, dir) = sb.run(&small(bundled("cubic_delta_sweep.toml")));
    assert!(out.status.success(), "{}", stdout(&out));
    let m = manifest(&dir);
    let check = m["checks"].as_array().unwrap().iter().find(|c| c["name"] == "u_gap_monotone").unwrap();
    assert_eq!(check["passed"], true);
    assert_eq!(verdict(&m, "perturbation", "hjb", "value_at_x0")["status"], "pass");

    let study = std::fs::read_to_string(dir.join("study.csv")).unwrap();
    let mut lines = study.lines();
    assert_eq!(lines.next(), Some("delta,sup_u_gap,sup_V_residual,ratio"));
    let gaps: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(gaps.len(), 4);
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(dir.join("k_curves.csv").exists());
}

#[test]
fn empty_route_list_writes_validation_only() {
    let sb = Sandbox::new();
    let mut cfg = toml::Table::new();
    cfg.insert("schema".into(), 1.into());
    cfg.insert("name".into(), "empty".into());
    let (out, dir) = sb.run(&cfg);
    assert!(out.status.success());
    let m = manifest(&dir);
    assert_eq!(m["routes"].as_array().unwrap().len(), 0);
    assert_eq!(m["verdicts"].as_array().unwrap().len(), 0);
    assert_eq!(m["validation"]["passed"], true);
    assert!(!m["validation"]["clauses"].as_array().unwrap().is_empty());
}

#[test]
fn invalid_problem_aborts_without_manifest() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("lqr_constant.toml"));
    cfg.insert("control_cost".into(), 0.0.into());
    let (out, dir) = sb.run(&cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation failed"));
    assert!(!dir.join("manifest.json").exists());
}

#[test]
fn config_errors_are_reported() {
    let sb = Sandbox::new();
    let mut typo = small(bundled("lqr_constant.toml"));
    typo.insert("n_path".into(), 10.into());
    let (out, _) = sb.run(&typo);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_path"));

    let mut unseeded = small(bundled("lqr_constant.toml"));
    unseeded.remove("seed");
    let (out, _) = sb.run(&unseeded);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn failed_route_is_recorded_and_others_finish() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("lqr_constant.toml"));
    cfg.insert("routes".into(), toml::Value::try_from(["ode", "hjb"]).unwrap());
    cfg.insert("theta".into(), 0.2.into());
    let (out, dir) = sb.run(&cfg);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&dir);
    assert_eq!(m["routes"][0]["status"], "ok");
    assert_eq!(m["routes"][1]["status"], "failed");
    assert!(m["routes"][1]["error"].as_str().unwrap().contains("theta"));
    assert_eq!(m["all_passed"], false);
}

#[test]
fn ode_route_is_skipped_for_perturbed_problems() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("cubic_delta_sweep.toml"));
    cfg.insert("routes".into(), toml::Value::try_from(["ode", "hjb"]).unwrap());
    let (out, dir) = sb.run(&cfg);
    assert!(out.status.success());
    assert_eq!(manifest(&dir)["routes"][0]["status"], "skipped");
}

#[test]
fn compare_verb() {
    let sb = Sandbox::new();
    let (_, dir) = sb.run(&small(bundled("lqr_constant.toml")));
    let path = dir.join("manifest.json");
    let m = path.to_str().unwrap();

    let same = sb.pertlq(&["compare", m, "hjb", "hjb", "value_at_x0", "--abs", "0"]);
    assert!(same.status.success());
    assert!(stdout(&same).contains("PASS") && stdout(&same).contains("gap 0.000e0"));

    let ode_hjb = sb.pertlq(&["compare", m, "ode", "hjb", "value_at_x0", "--abs", "1e-3"]);
    assert!(ode_hjb.status.success(), "{}", stdout(&ode_hjb));

    let mc = sb.pertlq(&["compare", m, "fbsde", "fbsde_driftless", "value_at_x0", "--se", "3"]);
    assert!(mc.status.success());
    assert!(stdout(&mc).contains("(se)"));

    let missing = sb.pertlq(&["compare", m, "ode", "perturbation", "value_at_x0", "--abs", "1"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stdout(&missing).contains("NOT COMPARABLE"));

    let no_se = sb.pertlq(&["compare", m, "ode", "hjb", "value_at_x0", "--se", "3"]);
    assert!(stdout(&no_se).contains("NOT COMPARABLE"));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let sb = Sandbox::new();
    let mut cfg = small(bundled("cubic_delta_sweep.toml"));
    cfg.insert("routes".into(), toml::Value::try_from(["hjb"]).unwrap());
    let path = sb.write("sweep.toml", &cfg);
    let out = sb.pertlq(&["sweep", path.to_str().unwrap(), "--param", "delta", "--values", "0,0.05,0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = sb.root.path().join("cubic_delta_sweep");
    for v in ["0", "0.05", "0.1"] {
        assert!(dir.join(format!("delta_{v}")).join("manifest.json").exists());
    }
    let summary = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    // the cubic drift pulls the state toward zero, so the cost falls with delta
    let values: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");

    let bad = sb.pertlq(&["sweep", path.to_str().unwrap(), "--param", "horizon", "--values", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn validate_verb() {
    let sb = Sandbox::new();
    let good = sb.write("good.toml", &bundled("lqr_constant.toml"));
    let out = sb.pertlq(&["validate", good.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("config hash"));

    let mut cfg = bundled("lqr_constant.toml");
    cfg.insert("perturbation".into(), "cubic".into());
    let growing = sb.write("growing.toml", &cfg);
    let out = sb.pertlq(&["validate", growing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL one_sided_growth"), "{}", stdout(&out));

    cfg.insert("diffusion".into(), 0.0.into());
    let degenerate = sb.write("degenerate.toml", &cfg);
    let out = sb.pertlq(&["validate", degenerate.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation failed"));
}
