//! Run configuration: JSON document plus flag overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ned_core::grid::{Interval, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Dichotomy,
    Theta,
    Perturb,
    Admissibility,
    Example,
}

impl Check {
    pub fn parse(s: &str) -> Result<Check, String> {
        match s {
            "dichotomy" => Ok(Check::Dichotomy),
            "theta" => Ok(Check::Theta),
            "perturb" => Ok(Check::Perturb),
            "admissibility" => Ok(Check::Admissibility),
            "example" => Ok(Check::Example),
            other => Err(format!("unknown check '{other}'")),
        }
    }
}

pub const ALL_CHECKS: [Check; 5] = [
    Check::Dichotomy,
    Check::Theta,
    Check::Perturb,
    Check::Admissibility,
    Check::Example,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub k: f64,
    pub alpha: f64,
    pub eps: f64,
}

/// One run: scenario, grid, requested checks, and numeric knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub checks: Option<Vec<Check>>,
    /// Pinned star-norm exponent; the certificate optimizer chooses one
    /// when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Pin the dichotomy eps in the fit.
    #[serde(default)]
    pub eps_fixed: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_anchor_stride")]
    pub anchor_stride: usize,
    /// Threshold for the pointwise `||B(t)|| <= delta e^{-2 eps |t|}` probe.
    #[serde(default = "default_pointwise_delta")]
    pub pointwise_delta: f64,
    /// Use these constants instead of fitting (theta may then run without
    /// the dichotomy check).
    #[serde(default)]
    pub declared_constants: Option<DeclaredConstants>,
    #[serde(default)]
    pub out: Option<String>,
}

fn default_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    200
}

fn default_anchor_stride() -> usize {
    10
}

fn default_pointwise_delta() -> f64 {
    0.01
}

impl RunConfig {
    pub fn template(scenario: &str) -> RunConfig {
        RunConfig {
            scenario: scenario.to_string(),
            params: BTreeMap::new(),
            grid: None,
            checks: None,
            beta: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
            eps_fixed: None,
            seed: 0,
            anchor_stride: default_anchor_stride(),
            pointwise_delta: default_pointwise_delta(),
            declared_constants: None,
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// The per-scenario default grid, used when none is configured.
    pub fn default_grid(scenario: &str) -> GridConfig {
        match scenario {
            "example_sys" => GridConfig { t_min: 0.0, t_max: 30.0, h: 0.02 },
            "saddle_2x2" => GridConfig { t_min: 0.0, t_max: 10.0, h: 0.01 },
            "nonlocal_ide" => GridConfig { t_min: -20.0, t_max: 20.0, h: 0.05 },
            _ => GridConfig { t_min: -10.0, t_max: 10.0, h: 0.01 },
        }
    }

    pub fn resolved_checks(&self) -> Vec<Check> {
        let mut checks = self.checks.clone().unwrap_or_else(|| ALL_CHECKS.to_vec());
        checks.sort();
        checks.dedup();
        checks
    }

    pub fn build_grid(&self) -> Result<TimeGrid, String> {
        let g = self
            .grid
            .clone()
            .unwrap_or_else(|| Self::default_grid(&self.scenario));
        let interval = if g.t_min >= -1e-12 {
            Interval::HalfLinePlus
        } else if g.t_max <= 1e-12 {
            Interval::HalfLineMinus
        } else {
            Interval::FullLine
        };
        TimeGrid::new(g.t_min, g.t_max, g.h, interval).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(format!("tol = {} must be positive", self.tol));
        }
        if self.max_iter == 0 {
            return Err("max_iter must be positive".into());
        }
        if self.resolved_checks().is_empty() {
            return Err("requested check set is empty".into());
        }
        if let Some(beta) = self.beta {
            if beta.is_nan() || beta <= 0.0 {
                return Err(format!("beta = {beta} must be positive"));
            }
            let alpha = self
                .declared_constants
                .map(|d| d.alpha)
                .or_else(|| self.known_alpha());
            if let Some(alpha) = alpha {
                if beta >= alpha {
                    return Err(format!(
                        "beta = {beta} must lie below the scenario exponent alpha = {alpha}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Analytic exponent of the scenario, when the catalog knows it.
    fn known_alpha(&self) -> Option<f64> {
        match self.scenario.as_str() {
            "scalar_decay" | "saddle_2x2" | "example_sys" => Some(1.0),
            "nonlocal_ide" => Some(self.params.get("a").copied().unwrap_or(-1.0).abs()),
            _ => None,
        }
    }
}
