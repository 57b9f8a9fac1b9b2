use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Result, StatsError};
use crate::summary::{summarize_values, CellSeries, CellSummary, Summarize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Unpaired,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub kind: TestKind,
    /// Zero standard error: `p` is 1 for equal means and 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided Student-t tail probability `P(|T| >= |t|)` for `df` degrees of freedom,
/// as the regularized incomplete beta `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || !(df > 0.0) {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Upper-tail probability `P(T >= t)`.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let half = 0.5 * two_sided_p(t, df);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// Welch-Satterthwaite degrees of freedom for two independent samples.
pub fn welch_df(sx: f64, nx: usize, sy: f64, ny: usize) -> f64 {
    let vx = sx * sx / nx as f64;
    let vy = sy * sy / ny as f64;
    (vx + vy).powi(2) / (vx * vx / (nx - 1) as f64 + vy * vy / (ny - 1) as f64)
}

fn testable_sd(s: &CellSummary, side: &str) -> Result<f64> {
    match s.sd {
        Some(sd) if s.n >= 2 => Ok(sd),
        _ => Err(StatsError::Insufficient(format!("{side} sample has n = {}, need at least 2", s.n))),
    }
}

fn degenerate(diff: f64, df: f64, kind: TestKind) -> TestResult {
    let (t, p) = if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
    TestResult { t, df, p, kind, degenerate: true }
}

/// Welch's unpaired t-test of `x` against `y`; accepts summaries or raw series.
pub fn welch_unpaired<X, Y>(x: &X, y: &Y) -> Result<TestResult>
where
    X: Summarize + ?Sized,
    Y: Summarize + ?Sized,
{
    let (x, y) = (x.summary()?, y.summary()?);
    let sx = testable_sd(&x, "first")?;
    let sy = testable_sd(&y, "second")?;
    let diff = x.mean - y.mean;
    let se2 = sx * sx / x.n as f64 + sy * sy / y.n as f64;
    if se2 == 0.0 {
        return Ok(degenerate(diff, (x.n + y.n - 2) as f64, TestKind::Unpaired));
    }
    let t = diff / se2.sqrt();
    let df = welch_df(sx, x.n, sy, y.n);
    Ok(TestResult { t, df, p: two_sided_p(t, df), kind: TestKind::Unpaired, degenerate: false })
}

/// Paired-by-seed t-test on the differences `x_i - y_i` over the seeds both series share.
pub fn welch_paired(x: &CellSeries, y: &CellSeries) -> Result<TestResult> {
    x.validate()?;
    y.validate()?;
    let diffs: Vec<f64> = x
        .seeds
        .iter()
        .zip(&x.values)
        .filter_map(|(s, vx)| y.value_of(s).map(|vy| vx - vy))
        .collect();
    paired_from_differences(&diffs)
}

/// Paired test from the per-seed differences directly.
pub fn paired_from_differences(diffs: &[f64]) -> Result<TestResult> {
    if diffs.len() < 2 {
        return Err(StatsError::Insufficient(format!("{} paired seeds, need at least 2", diffs.len())));
    }
    let s = summarize_values(diffs)?;
    let sd = s.sd.unwrap_or(0.0);
    let df = (s.n - 1) as f64;
    if sd == 0.0 {
        return Ok(degenerate(s.mean, df, TestKind::Paired));
    }
    let t = s.mean / (sd / (s.n as f64).sqrt());
    Ok(TestResult { t, df, p: two_sided_p(t, df), kind: TestKind::Paired, degenerate: false })
}
