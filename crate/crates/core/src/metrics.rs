//! Scoring estimated probabilities against the truth and against each other.
//!
//! Values are stored raw. Tables scale MSE by 10^3 and MAPE by 10^2 only when
//! rendered, and every emitted row carries its unit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Truth values at or below this are skipped by [`mape`].
pub const MAPE_TRUTH_FLOOR: f64 = 1e-6;

pub fn mse(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(est, truth)?;
    if est.is_empty() {
        return Err(Error::shape("MSE of empty vectors"));
    }
    let sum: f64 = est.iter().zip(truth).map(|(e, t)| (t - e) * (t - e)).sum();
    Ok(sum / est.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub value: f64,
    /// Samples skipped because their truth was at or below the floor.
    pub filtered: usize,
}

pub fn mape(est: &[f64], truth: &[f64]) -> Result<Mape> {
    check_lengths(est, truth)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (e, &t) in est.iter().zip(truth) {
        if t > MAPE_TRUTH_FLOOR {
            sum += (t - e).abs() / t;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::config("MAPE undefined: no truth value above the floor"));
    }
    Ok(Mape {
        value: sum / used as f64,
        filtered: est.len() - used,
    })
}

/// Fraction of samples that land on the same side of `threshold` in both runs.
pub fn consistency(run_a: &[f64], run_b: &[f64], threshold: f64) -> Result<f64> {
    check_lengths(run_a, run_b)?;
    if run_a.is_empty() {
        return Err(Error::shape("consistency of empty vectors"));
    }
    let agree = run_a
        .iter()
        .zip(run_b)
        .filter(|(a, b)| (**a > threshold) == (**b > threshold))
        .count();
    Ok(agree as f64 / run_a.len() as f64)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observed,
    Unobserved,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Observed => "observed",
            Role::Unobserved => "unobserved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub variable: String,
    pub role: Role,
    pub mse: f64,
    pub mape: f64,
    pub mape_filtered: usize,
}

/// Scores of every variable on one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub test_size: usize,
    pub scores: Vec<VariableScore>,
}

impl EvalReport {
    pub fn score(&self, variable: &str) -> Option<&VariableScore> {
        self.scores.iter().find(|s| s.variable == variable)
    }

    /// Mean MAPE over the unobserved variables.
    pub fn mean_unobserved_mape(&self) -> f64 {
        let u: Vec<f64> = self
            .scores
            .iter()
            .filter(|s| s.role == Role::Unobserved)
            .map(|s| s.mape)
            .collect();
        u.iter().sum::<f64>() / u.len().max(1) as f64
    }

    pub fn mean_unobserved_mse(&self) -> f64 {
        let u: Vec<f64> = self
            .scores
            .iter()
            .filter(|s| s.role == Role::Unobserved)
            .map(|s| s.mse)
            .collect();
        u.iter().sum::<f64>() / u.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub strategy: String,
    pub threshold: f64,
    /// λ chosen by each of the two runs.
    pub lambdas: [f64; 2],
    /// `(variable, role, agreement)` in reporting order.
    pub agreement: Vec<(String, Role, f64)>,
}

impl ConsistencyReport {
    pub fn get(&self, variable: &str) -> Option<f64> {
        self.agreement
            .iter()
            .find(|(v, _, _)| v == variable)
            .map(|(_, _, a)| *a)
    }
}

pub const REPORT_HEADER: &str = "variable,role,strategy,metric,value,unit";

/// One CSV line per metric; `extra` columns are prepended (e.g. scenario, lambda).
pub fn report_rows(report: &EvalReport) -> Vec<[String; 6]> {
    let mut rows = Vec::with_capacity(report.scores.len() * 2);
    for s in &report.scores {
        rows.push([
            s.variable.clone(),
            s.role.name().into(),
            report.strategy.clone(),
            "mse".into(),
            s.mse.to_string(),
            "prob^2".into(),
        ]);
        rows.push([
            s.variable.clone(),
            s.role.name().into(),
            report.strategy.clone(),
            "mape".into(),
            s.mape.to_string(),
            "fraction".into(),
        ]);
    }
    rows
}

pub fn consistency_rows(report: &ConsistencyReport) -> Vec<[String; 6]> {
    report
        .agreement
        .iter()
        .map(|(v, role, a)| {
            [
                v.clone(),
                role.name().into(),
                report.strategy.clone(),
                "consistency".into(),
                a.to_string(),
                "fraction".into(),
            ]
        })
        .collect()
}

/// Human-readable table with MSE x10^3 and MAPE in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<30} {:<10} {:<6} {:>14} {:>10}",
        "variable", "role", "strat", "MSE (x10^3)", "MAPE (%)"
    );
    for r in reports {
        for s in &r.scores {
            let _ = writeln!(
                out,
                "{:<30} {:<10} {:<6} {:>14.3} {:>10.2}",
                s.variable,
                s.role.name(),
                r.strategy,
                s.mse * 1e3,
                s.mape * 1e2
            );
        }
    }
    out
}

pub fn render_consistency(reports: &[ConsistencyReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<30} {:<10} {:<6} {:>16}", "variable", "role", "strat", "agreement (%)");
    for r in reports {
        for (v, role, a) in &r.agreement {
            let _ = writeln!(out, "{:<30} {:<10} {:<6} {:>16.2}", v, role.name(), r.strategy, a * 1e2);
        }
    }
    out
}
