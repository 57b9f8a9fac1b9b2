use serde::{Deserialize, Serialize};

use crate::error::{Result, StatsError};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(StatsError::Invalid(format!("family-wise alpha must lie in (0, 1], got {alpha}")))
    }
}

fn check_p(p: &[f64]) -> Result<()> {
    match p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(StatsError::Invalid(format!("p-value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Per-test threshold `alpha / k`.
pub fn bonferroni(alpha: f64, k: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if k == 0 {
        return Err(StatsError::Invalid("Bonferroni needs at least one test".into()));
    }
    Ok(alpha / k as f64)
}

/// Rejections under the Bonferroni threshold, in input order.
pub fn bonferroni_reject(p: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_p(p)?;
    if p.is_empty() {
        check_alpha(alpha)?;
        return Ok(Vec::new());
    }
    let thr = bonferroni(alpha, p.len())?;
    Ok(p.iter().map(|&v| v < thr).collect())
}

/// Holm step-down: visit p-values in ascending order and reject the `i`-th
/// (0-based) while `p < alpha / (k - i)`; stop at the first failure.
/// Rejections are returned in input order.
pub fn holm(p: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_alpha(alpha)?;
    check_p(p)?;
    let k = p.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut reject = vec![false; k];
    for (i, &idx) in order.iter().enumerate() {
        if p[idx] < alpha / (k - i) as f64 {
            reject[idx] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

/// What a cell with `n` completed seeds may be used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Escalation {
    /// No observations.
    Invalid,
    /// One seed: selects candidates for seed expansion only; no test, no family membership.
    EscalateOnly,
    Testable,
}

impl Escalation {
    pub fn label(self) -> &'static str {
        match self {
            Escalation::Invalid => "invalid",
            Escalation::EscalateOnly => "escalate-only",
            Escalation::Testable => "testable",
        }
    }
}

pub fn escalation_gate(n: usize) -> Escalation {
    match n {
        0 => Escalation::Invalid,
        1 => Escalation::EscalateOnly,
        _ => Escalation::Testable,
    }
}
