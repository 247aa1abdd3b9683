mod config;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Route};
use manifest::{Manifest, Tolerance};

/// Batch runner for perturbed linear-quadratic control experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a config and run the problem validation probes.
    Validate { config: PathBuf },
    /// Run every route listed in a config and write the artifact directory.
    Run { config: PathBuf },
    /// Compare one quantity between two routes of a finished run.
    Compare {
        manifest: PathBuf,
        route_a: Route,
        route_b: Route,
        quantity: String,
        #[command(flatten)]
        tolerance: ToleranceArgs,
    },
    /// Run a config once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ToleranceArgs {
    /// Absolute tolerance.
    #[arg(long)]
    abs: Option<f64>,
    /// Tolerance relative to the second route's value.
    #[arg(long)]
    rel: Option<f64>,
    /// Multiple of the combined standard error.
    #[arg(long)]
    se: Option<f64>,
}

impl ToleranceArgs {
    fn tolerance(&self) -> Tolerance {
        match (self.abs, self.rel, self.se) {
            (Some(a), _, _) => Tolerance::Absolute(a),
            (_, Some(r), _) => Tolerance::Relative(r),
            (_, _, Some(k)) => Tolerance::Se(k),
            _ => unreachable!("clap requires one tolerance"),
        }
    }
}

impl clap::ValueEnum for Route {
    fn value_variants<'a>() -> &'a [Self] {
        &[Route::Ode, Route::Hjb, Route::Fbsde, Route::FbsdeDriftless, Route::Perturbation]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

fn summarize(m: &Manifest) {
    for r in &m.routes {
        println!("route {}: {:?} ({:.2} s)", r.route, r.status, r.seconds);
        if let Some(e) = &r.error {
            println!("  {e}");
        }
    }
    for v in &m.verdicts {
        println!("{v}");
    }
    for c in &m.checks {
        println!("{} {} [{}]: {}", if c.passed { "PASS" } else { "FAIL" }, c.route, c.name, c.detail);
    }
}

fn main_inner(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, report) = run::check_problem(&cfg)?;
            for c in &report.clauses {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.clause, c.detail);
            }
            println!("config hash {}", cfg.hash()?);
            Ok(report.passed())
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run::run(&cfg)?;
            summarize(&out.manifest);
            println!("manifest written to {}", out.dir.join(manifest::MANIFEST_FILE).display());
            Ok(out.manifest.all_passed)
        }
        Command::Compare { manifest, route_a, route_b, quantity, tolerance } => {
            let m = Manifest::load(&manifest)?;
            let v = m.compare(route_a, route_b, &quantity, tolerance.tolerance());
            println!("{v}");
            Ok(v.passed())
        }
        Command::Sweep { config, param, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            if values.is_empty() {
                bail!("--values needs at least one value");
            }
            let (dir, runs) = run::sweep(&cfg, &param, &values)?;
            for (v, m) in &runs {
                println!("{param} = {v}: {}", if m.all_passed { "PASS" } else { "FAIL" });
            }
            println!("summary written to {}", dir.join("sweep.csv").display());
            Ok(runs.iter().all(|(_, m)| m.all_passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
