//! Experiment configuration: a flat TOML table with a versioned schema key.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pertlq::bsde::{BsdeConfig, BsdeScheme};
use pertlq::hjb::SchemeConfig;
use pertlq::{BreakpointTable, Perturbation, ProblemSpec, SpaceGrid, TimeFn, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA: u32 = 1;

/// Environment variable that relocates every relative output directory.
pub const OUTPUT_ROOT_ENV: &str = "PLQ_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Ode,
    Hjb,
    Fbsde,
    FbsdeDriftless,
    Perturbation,
}

impl Route {
    pub fn is_monte_carlo(self) -> bool {
        matches!(self, Route::Fbsde | Route::FbsdeDriftless)
    }

    pub fn name(self) -> &'static str {
        match self {
            Route::Ode => "ode",
            Route::Hjb => "hjb",
            Route::Fbsde => "fbsde",
            Route::FbsdeDriftless => "fbsde_driftless",
            Route::Perturbation => "perturbation",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A coefficient given as a constant, a breakpoint table `[[t, v], ...]` or
/// `{ scale, rate }` for `scale * exp(rate * t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Table(Vec<[f64; 2]>),
    Exponential { scale: f64, rate: f64 },
}

impl Coefficient {
    fn to_time_fn(&self, key: &str) -> Result<TimeFn<f64>> {
        Ok(match self {
            Coefficient::Constant(v) => TimeFn::Constant(*v),
            Coefficient::Table(rows) => {
                let knots = rows.iter().map(|r| (r[0], r[1])).collect();
                TimeFn::Table(BreakpointTable::new(knots).with_context(|| format!("coefficient `{key}`"))?)
            }
            Coefficient::Exponential { scale, rate } => TimeFn::Exponential { scale: *scale, rate: *rate },
        })
    }
}

/// Parses `zero`, `neg_cubic`, `cubic` or `linear(c)`.
pub fn parse_perturbation(text: &str) -> Result<Perturbation<f64>> {
    let t = text.trim();
    Ok(match t {
        "zero" => Perturbation::Zero,
        "neg_cubic" => Perturbation::NegCubic,
        "cubic" => Perturbation::Cubic,
        _ => {
            let inner = t
                .strip_prefix("linear(")
                .and_then(|r| r.strip_suffix(')'))
                .with_context(|| format!("unknown perturbation `{t}` (expected zero, neg_cubic, cubic or linear(c))"))?;
            let c: f64 = inner.trim().parse().with_context(|| format!("bad coefficient in `{t}`"))?;
            Perturbation::Linear(c)
        }
    })
}

fn c(v: f64) -> Coefficient {
    Coefficient::Constant(v)
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        mod default {
            use super::*;
            $(pub fn $name() -> $ty { $val })*
        }
    };
}

defaults! {
    one: f64 = 1.0;
    zero_coef: Coefficient = c(0.0);
    one_coef: Coefficient = c(1.0);
    perturbation: String = "zero".into();
    density: usize = 32;
    x_min: f64 = -6.0;
    x_max: f64 = 6.0;
    x_nodes: usize = 401;
    t_steps: usize = 2000;
    ode_steps: usize = 1000;
    theta: f64 = 0.5;
    picard_iterations: usize = 2;
    picard_tol: f64 = 1e-10;
    n_paths: usize = 100_000;
    n_steps: usize = 50;
    degree: usize = 4;
    bootstrap: usize = 20;
    bsde_scheme: String = "damped".into();
    deltas: Vec<f64> = pertlq::perturbation::DELTAS.to_vec();
    window: [f64; 2] = [pertlq::perturbation::WINDOW.0, pertlq::perturbation::WINDOW.1];
    tol_abs: f64 = 1e-3;
    tol_rel: f64 = 0.01;
    se_factor: f64 = 3.0;
    expansion_factor: f64 = 10.0;
    surface_slices: usize = 51;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub routes: Vec<Route>,
    /// Relative paths are resolved against the output root.
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Run independent routes concurrently.
    #[serde(default)]
    pub parallel: bool,

    #[serde(default = "default::one")]
    pub horizon: f64,
    #[serde(default = "default::one")]
    pub x0: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default::perturbation")]
    pub perturbation: String,
    #[serde(default = "default::zero_coef")]
    pub drift_linear: Coefficient,
    #[serde(default = "default::one_coef")]
    pub control_gain: Coefficient,
    #[serde(default = "default::one_coef")]
    pub control_cost: Coefficient,
    #[serde(default = "default::one_coef")]
    pub state_cost: Coefficient,
    #[serde(default = "default::one_coef")]
    pub diffusion: Coefficient,
    #[serde(default = "default::zero_coef")]
    pub target: Coefficient,
    #[serde(default)]
    pub discount_rate: f64,
    #[serde(default)]
    pub terminal_weight: f64,

    #[serde(default = "default::density")]
    pub validation_density: usize,

    #[serde(default = "default::x_min")]
    pub x_min: f64,
    #[serde(default = "default::x_max")]
    pub x_max: f64,
    #[serde(default = "default::x_nodes")]
    pub x_nodes: usize,
    #[serde(default = "default::t_steps")]
    pub t_steps: usize,
    #[serde(default = "default::ode_steps")]
    pub ode_steps: usize,
    #[serde(default = "default::theta")]
    pub theta: f64,
    #[serde(default = "default::picard_iterations")]
    pub picard_iterations: usize,
    #[serde(default = "default::picard_tol")]
    pub picard_tol: f64,
    /// Time slices written to the surface CSV.
    #[serde(default = "default::surface_slices")]
    pub surface_slices: usize,

    #[serde(default = "default::n_paths")]
    pub n_paths: usize,
    #[serde(default = "default::n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default::degree")]
    pub basis_degree: usize,
    #[serde(default = "default::bootstrap")]
    pub bootstrap: usize,
    /// `damped`, `crank_nicolson` or `explicit`.
    #[serde(default = "default::bsde_scheme")]
    pub bsde_scheme: String,

    #[serde(default = "default::deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default::window")]
    pub window: [f64; 2],

    #[serde(default = "default::tol_abs")]
    pub tol_abs: f64,
    #[serde(default = "default::tol_rel")]
    pub tol_rel: f64,
    #[serde(default = "default::se_factor")]
    pub se_factor: f64,
    /// The expansion is accepted within `expansion_factor * delta^2`.
    #[serde(default = "default::expansion_factor")]
    pub expansion_factor: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn check(&self) -> Result<()> {
        if self.schema != SCHEMA {
            bail!("unsupported schema {} (this build reads schema {SCHEMA})", self.schema);
        }
        let mut seen = self.routes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.routes.len() {
            bail!("a route is listed more than once");
        }
        if self.routes.iter().any(|r| r.is_monte_carlo()) && self.seed.is_none() {
            bail!("`seed` is required when a Monte Carlo route is selected");
        }
        parse_perturbation(&self.perturbation)?;
        self.bsde_scheme()?;
        if self.window[0] >= self.window[1] {
            bail!("window must satisfy lo < hi");
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<ProblemSpec<f64>> {
        Ok(ProblemSpec::builder()
            .horizon(self.horizon)
            .x0(self.x0)
            .delta(self.delta)
            .perturbation(parse_perturbation(&self.perturbation)?)
            .drift_linear(self.drift_linear.to_time_fn("drift_linear")?)
            .control_gain(self.control_gain.to_time_fn("control_gain")?)
            .control_cost(self.control_cost.to_time_fn("control_cost")?)
            .state_cost(self.state_cost.to_time_fn("state_cost")?)
            .diffusion(self.diffusion.to_time_fn("diffusion")?)
            .target(self.target.to_time_fn("target")?)
            .discount_rate(self.discount_rate)
            .terminal_weight(self.terminal_weight)
            .build()?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>> {
        Ok(TimeGrid::uniform(self.horizon, self.t_steps)?)
    }

    pub fn space_grid(&self) -> Result<SpaceGrid<f64>> {
        Ok(SpaceGrid::new(self.x_min, self.x_max, self.x_nodes)?)
    }

    pub fn scheme(&self) -> SchemeConfig<f64> {
        SchemeConfig { theta: self.theta, picard_iterations: self.picard_iterations, picard_tol: self.picard_tol }
    }

    fn bsde_scheme(&self) -> Result<BsdeScheme<f64>> {
        Ok(match self.bsde_scheme.as_str() {
            "damped" => BsdeScheme::damped(),
            "crank_nicolson" => BsdeScheme::crank_nicolson(),
            "explicit" => BsdeScheme::explicit(),
            other => bail!("unknown bsde_scheme `{other}` (expected damped, crank_nicolson or explicit)"),
        })
    }

    pub fn bsde(&self) -> Result<BsdeConfig<f64>> {
        Ok(BsdeConfig {
            degree: self.basis_degree,
            scheme: self.bsde_scheme()?,
            bootstrap: self.bootstrap,
            bootstrap_seed: self.seed.unwrap_or(0).wrapping_add(0x9e37_79b9),
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        let dir = PathBuf::from(self.output_dir.clone().unwrap_or_else(|| self.name.clone()));
        if dir.is_absolute() {
            return dir;
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir,
        }
    }

    /// Overrides one numeric parameter, as used by the sweep verb.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let as_count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                bail!("`{name}` needs a non-negative integer, got {value}")
            }
        };
        match name {
            "delta" => self.delta = value,
            "x0" => self.x0 = value,
            "terminal_weight" => self.terminal_weight = value,
            "discount_rate" => self.discount_rate = value,
            "diffusion" => self.diffusion = Coefficient::Constant(value),
            "seed" => self.seed = Some(as_count()? as u64),
            "n_paths" => self.n_paths = as_count()?,
            "n_steps" => self.n_steps = as_count()?,
            "x_nodes" => self.x_nodes = as_count()?,
            "t_steps" => self.t_steps = as_count()?,
            _ => bail!("parameter `{name}` cannot be swept"),
        }
        self.check()
    }
}
