//! Report schema and table emission.
//!
//! The JSON report and the CSV tables are deterministic for a given config:
//! wall times are stripped from the report and written to a separate
//! sidecar. Table numbers carry 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub lag: f64,
    pub norm: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DichotomyRecord {
    pub k: f64,
    pub alpha: f64,
    pub eps: f64,
    pub fit_residual: f64,
    pub eps_unidentifiable: bool,
    pub stable_violation: f64,
    pub unstable_violation: f64,
    pub commutation_residual: f64,
    pub pass: bool,
    pub envelope: Vec<EnvelopeRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub k_used: f64,
    pub alpha_used: f64,
    pub eps_used: f64,
    pub beta: f64,
    pub theta: f64,
    pub tail_bound: f64,
    pub k_theta: f64,
    pub passes: bool,
    /// (t, inner integral) profile rows.
    pub profile: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    pub k: usize,
    pub delta: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbRecord {
    pub iterations: usize,
    pub stable_sweeps: usize,
    pub family_sweeps: usize,
    pub final_delta: f64,
    pub max_contraction_ratio: f64,
    pub contraction_bound: f64,
    pub tail_budget: f64,
    pub identity_residual: f64,
    pub cocycle_residual: f64,
    pub perturbed_k: f64,
    pub perturbed_alpha: f64,
    pub perturbed_eps: f64,
    pub perturbed_pass: bool,
    pub perturbed_commutation: f64,
    pub exponent_target: f64,
    pub meets_exponent_target: bool,
    pub history: Vec<IterationRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityCase {
    pub beta: f64,
    pub style: String,
    pub forcing: String,
    pub y_norm: f64,
    pub x_norm: f64,
    pub fixed_point_residual: f64,
    pub ode_residual: f64,
    pub voc_residual: f64,
    pub z_defect: f64,
    pub boundary_flagged: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityRecord {
    pub cases: Vec<AdmissibilityCase>,
    pub vacuous: bool,
    /// Slack of the fixed-point size bound on the primary signed pair,
    /// absent when `2 K theta >= 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_bound_slack: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    /// Named scenario facts and measured values.
    pub values: Vec<(String, f64)>,
    /// The pointwise smallness probe `||B(t)|| <= delta e^{-2 eps |t|}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointwise_required_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointwise_delta_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointwise_bound_holds: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_passes: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_demonstrated: Option<bool>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dichotomy: Option<DichotomyRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admissibility: Option<AdmissibilityRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example: Option<ExampleRecord>,
    /// Wall time, excluded from the deterministic report.
    #[serde(skip)]
    pub wall_ms: u128,
}

impl CheckRecord {
    pub fn new(name: &str) -> Self {
        CheckRecord {
            name: name.to_string(),
            verdict: Verdict::Error,
            error: None,
            dichotomy: None,
            theta: None,
            perturb: None,
            admissibility: None,
            example: None,
            wall_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub scenario: String,
    pub config: RunConfig,
    pub checks: Vec<CheckRecord>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.checks.iter().any(|c| c.verdict == Verdict::Error) {
            3
        } else if self.checks.iter().any(|c| c.verdict == Verdict::Fail) {
            1
        } else {
            0
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `report.json` plus the plot-ready tables. Wall times go to
/// `timings.csv`, which is the only non-deterministic output.
pub fn emit(report: &RunReport, dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut json = serde_json::to_string_pretty(report).map_err(|e| e.to_string())?;
    json.push('\n');
    write(dir, "report.json", &json)?;

    write(dir, "envelope.csv", &envelope_csv(report))?;
    write(dir, "iterations.csv", &iterations_csv(report))?;
    write(dir, "theta_profile.csv", &theta_profile_csv(report))?;

    let mut timings = String::from("check,wall_ms\n");
    for c in &report.checks {
        let _ = writeln!(timings, "{},{}", c.name, c.wall_ms);
    }
    write(dir, "timings.csv", &timings)?;
    Ok(())
}

fn envelope_csv(report: &RunReport) -> String {
    let mut out = String::from("lag,norm,bound,ratio\n");
    if let Some(rec) = report.checks.iter().find_map(|c| c.dichotomy.as_ref()) {
        for row in &rec.envelope {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                num(row.lag),
                num(row.norm),
                num(row.bound),
                num(row.ratio)
            );
        }
    }
    out
}

fn iterations_csv(report: &RunReport) -> String {
    let mut out = String::from("k,delta,ratio\n");
    if let Some(rec) = report.checks.iter().find_map(|c| c.perturb.as_ref()) {
        for row in &rec.history {
            let _ = writeln!(out, "{},{},{}", row.k, num(row.delta), num(row.ratio));
        }
    }
    out
}

fn theta_profile_csv(report: &RunReport) -> String {
    let mut out = String::from("t,integral\n");
    if let Some(rec) = report.checks.iter().find_map(|c| c.theta.as_ref()) {
        for (t, v) in &rec.profile {
            let _ = writeln!(out, "{},{}", num(*t), num(*v));
        }
    }
    out
}

fn write(dir: &Path, name: &str, content: &str) -> Result<(), String> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Caps a row collection at `max` entries by deterministic thinning.
pub fn thin<T: Clone>(rows: &[T], max: usize) -> Vec<T> {
    if rows.len() <= max {
        return rows.to_vec();
    }
    let stride = rows.len().div_ceil(max);
    rows.iter().step_by(stride).cloned().collect()
}
