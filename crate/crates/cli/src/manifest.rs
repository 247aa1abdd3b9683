//! The run manifest and the verdict logic shared by `run` and `compare`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use pertlq::ValidationReport;
use serde::{Deserialize, Serialize};

use crate::config::Route;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteStatus {
    Ok,
    Failed,
    Skipped,
}

/// A headline number, with a standard error for Monte Carlo estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

impl Quantity {
    pub fn exact(value: f64) -> Self {
        Self { value, se: None }
    }

    pub fn estimate(value: f64, se: f64) -> Self {
        Self { value, se: Some(se) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub route: Route,
    pub status: RouteStatus,
    pub seconds: f64,
    /// Paths relative to the manifest.
    pub outputs: Vec<String>,
    pub quantities: BTreeMap<String, Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RouteRecord {
    pub fn skipped(route: Route, why: &str) -> Self {
        Self {
            route,
            status: RouteStatus::Skipped,
            seconds: 0.0,
            outputs: Vec::new(),
            quantities: BTreeMap::new(),
            error: Some(why.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceSource {
    Absolute,
    Relative,
    Se,
}

impl fmt::Display for ToleranceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToleranceSource::Absolute => "absolute",
            ToleranceSource::Relative => "relative",
            ToleranceSource::Se => "se",
        })
    }
}

/// How a tolerance is derived from the two quantities being compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    Absolute(f64),
    /// Fraction of the magnitude of the second quantity.
    Relative(f64),
    /// Multiple of the combined standard error.
    Se(f64),
    /// The larger of a relative and an SE-based tolerance.
    RelativeOrSe(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    NotComparable,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictStatus::Pass => "PASS",
            VerdictStatus::Fail => "FAIL",
            VerdictStatus::NotComparable => "NOT COMPARABLE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub route_a: Route,
    pub route_b: Route,
    pub quantity: String,
    pub status: VerdictStatus,
    pub gap: Option<f64>,
    pub tolerance: Option<f64>,
    pub source: Option<ToleranceSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Verdict {
    pub fn not_comparable(route_a: Route, route_b: Route, quantity: &str, note: String) -> Self {
        Self {
            route_a,
            route_b,
            quantity: quantity.to_string(),
            status: VerdictStatus::NotComparable,
            gap: None,
            tolerance: None,
            source: None,
            note: Some(note),
        }
    }

    /// Judges a precomputed gap, for quantities that only exist in memory (such as sup gaps).
    pub fn from_gap(route_a: Route, route_b: Route, quantity: &str, gap: f64, tol: f64, source: ToleranceSource) -> Self {
        let status = if gap <= tol { VerdictStatus::Pass } else { VerdictStatus::Fail };
        Self {
            route_a,
            route_b,
            quantity: quantity.to_string(),
            status,
            gap: Some(gap),
            tolerance: Some(tol),
            source: Some(source),
            note: None,
        }
    }

    pub fn compare(route_a: Route, a: Quantity, route_b: Route, b: Quantity, quantity: &str, tol: Tolerance) -> Self {
        let gap = (a.value - b.value).abs();
        let combined = match (a.se, b.se) {
            (None, None) => None,
            (sa, sb) => Some(sa.unwrap_or(0.0).hypot(sb.unwrap_or(0.0))),
        };
        let (tol, source) = match tol {
            Tolerance::Absolute(t) => (t, ToleranceSource::Absolute),
            Tolerance::Relative(r) => (r * b.value.abs(), ToleranceSource::Relative),
            Tolerance::Se(k) => match combined {
                Some(se) => (k * se, ToleranceSource::Se),
                None => {
                    return Self::not_comparable(route_a, route_b, quantity, "neither side carries a standard error".into())
                }
            },
            Tolerance::RelativeOrSe(r, k) => {
                let rel = r * b.value.abs();
                match combined {
                    Some(se) if k * se > rel => (k * se, ToleranceSource::Se),
                    _ => (rel, ToleranceSource::Relative),
                }
            }
        };
        Self::from_gap(route_a, route_b, quantity, gap, tol, source)
    }

    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} vs {} [{}]", self.status, self.route_a, self.route_b, self.quantity)?;
        if let (Some(g), Some(t), Some(s)) = (self.gap, self.tolerance, self.source) {
            write!(f, ": gap {g:.3e}, tolerance {t:.3e} ({s})")?;
        }
        if let Some(n) = &self.note {
            write!(f, ": {n}")?;
        }
        Ok(())
    }
}

/// A single-route diagnostic with a pass/fail outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub route: Route,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseEntry {
    pub clause: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness_x: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub passed: bool,
    pub probe_density: usize,
    pub clauses: Vec<ClauseEntry>,
    pub constants: BTreeMap<String, f64>,
}

impl From<&ValidationReport<f64>> for ValidationSummary {
    fn from(r: &ValidationReport<f64>) -> Self {
        let c = &r.constants;
        let constants = [
            ("epsilon", c.epsilon),
            ("growth_c", c.growth_c),
            ("lipschitz_k", c.lipschitz_k),
            ("sigma_min", c.sigma_min),
            ("sigma_max", c.sigma_max),
            ("drift_linear_max", c.drift_linear_max),
            ("control_gain_max", c.control_gain_max),
            ("h_min", c.h_min),
            ("h_log_derivative_max", c.h_log_derivative_max),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            passed: r.passed(),
            probe_density: r.probe_density,
            clauses: r
                .clauses
                .iter()
                .map(|c| ClauseEntry {
                    clause: c.clause.to_string(),
                    passed: c.passed,
                    witness_t: c.witness.map(|w| w.0),
                    witness_x: c.witness.and_then(|w| w.1),
                    detail: c.detail.clone(),
                })
                .collect(),
            constants,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub software_version: String,
    pub name: String,
    pub config_hash: String,
    pub validation: ValidationSummary,
    pub routes: Vec<RouteRecord>,
    pub verdicts: Vec<Verdict>,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

impl Manifest {
    pub fn route(&self, route: Route) -> Option<&RouteRecord> {
        self.routes.iter().find(|r| r.route == route)
    }

    pub fn quantity(&self, route: Route, name: &str) -> Option<Quantity> {
        self.route(route).filter(|r| r.status == RouteStatus::Ok).and_then(|r| r.quantities.get(name).copied())
    }

    pub fn compare(&self, a: Route, b: Route, quantity: &str, tol: Tolerance) -> Verdict {
        match (self.quantity(a, quantity), self.quantity(b, quantity)) {
            (Some(qa), Some(qb)) => Verdict::compare(a, qa, b, qb, quantity, tol),
            (qa, _) => {
                let missing = if qa.is_none() { a } else { b };
                Verdict::not_comparable(a, b, quantity, format!("route {missing} did not produce `{quantity}`"))
            }
        }
    }

    pub fn settle(&mut self) {
        self.all_passed = self.routes.iter().all(|r| r.status != RouteStatus::Failed)
            && self.verdicts.iter().all(Verdict::passed)
            && self.checks.iter().all(|c| c.passed);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_tolerance_combines_errors() {
        let v = Verdict::compare(
            Route::Fbsde,
            Quantity::estimate(1.0, 0.003),
            Route::FbsdeDriftless,
            Quantity::estimate(1.01, 0.004),
            "value_at_x0",
            Tolerance::Se(3.0),
        );
        assert_eq!(v.tolerance, Some(3.0 * 0.005));
        assert!(v.passed());
    }

    #[test]
    fn se_tolerance_needs_an_error_bar() {
        let v = Verdict::compare(Route::Ode, Quantity::exact(1.0), Route::Hjb, Quantity::exact(1.0), "v", Tolerance::Se(3.0));
        assert_eq!(v.status, VerdictStatus::NotComparable);
    }

    #[test]
    fn relative_or_se_picks_the_larger() {
        let a = Quantity::estimate(1.0, 0.01);
        let b = Quantity::exact(1.02);
        let v = Verdict::compare(Route::Fbsde, a, Route::Hjb, b, "v", Tolerance::RelativeOrSe(0.01, 3.0));
        assert_eq!(v.source, Some(ToleranceSource::Se));
        assert!(v.passed());
        let tight = Verdict::compare(Route::Fbsde, Quantity::estimate(1.0, 1e-5), Route::Hjb, b, "v", Tolerance::RelativeOrSe(0.01, 3.0));
        assert_eq!(tight.source, Some(ToleranceSource::Relative));
        assert_eq!(tight.status, VerdictStatus::Fail);
    }

    #[test]
    fn absolute_boundary_is_inclusive() {
        let v = Verdict::compare(Route::Ode, Quantity::exact(1.0), Route::Hjb, Quantity::exact(1.5), "v", Tolerance::Absolute(0.5));
        assert!(v.passed());
    }
}
