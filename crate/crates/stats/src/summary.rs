use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StatsError};

/// Per-seed observations of one metric for one (benchmark, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeries {
    pub benchmark: String,
    pub variant: String,
    pub seeds: Vec<String>,
    /// Percentage points, one per seed.
    pub values: Vec<f64>,
}

impl CellSeries {
    pub fn new(
        benchmark: impl Into<String>,
        variant: impl Into<String>,
        seeds: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let s = Self { benchmark: benchmark.into(), variant: variant.into(), seeds, values };
        s.validate()?;
        Ok(s)
    }

    /// Series with seeds labelled `0..n`.
    pub fn from_values(variant: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let seeds = (0..values.len()).map(|i| i.to_string()).collect();
        Self::new("", variant, seeds, values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() != self.values.len() {
            return Err(StatsError::Invalid(format!(
                "`{}`: {} seeds for {} values",
                self.variant,
                self.seeds.len(),
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(StatsError::Invalid(format!("`{}`: non-finite value {v}", self.variant)));
        }
        let distinct: BTreeSet<&String> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(StatsError::Invalid(format!("`{}`: repeated seed label", self.variant)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_of(&self, seed: &str) -> Option<f64> {
        self.seeds.iter().position(|s| s == seed).map(|i| self.values[i])
    }
}

/// Mean and sample standard deviation of a cell. `sd` is `None` when `n = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

impl CellSummary {
    pub fn new(mean: f64, sd: Option<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(StatsError::Invalid("summary with n = 0".into()));
        }
        if !mean.is_finite() {
            return Err(StatsError::Invalid(format!("non-finite mean {mean}")));
        }
        let sd = if n == 1 { None } else { sd };
        if let Some(s) = sd {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(StatsError::Invalid(format!("standard deviation must be finite and >= 0, got {s}")));
            }
        }
        Ok(Self { mean, sd, n })
    }

    /// True when the standard deviation is undefined (a single observation).
    pub fn sd_undefined(&self) -> bool {
        self.sd.is_none()
    }
}

/// Anything a cell summary can be computed from.
pub trait Summarize {
    fn summary(&self) -> Result<CellSummary>;
}

impl Summarize for CellSummary {
    fn summary(&self) -> Result<CellSummary> {
        Ok(*self)
    }
}

impl Summarize for CellSeries {
    fn summary(&self) -> Result<CellSummary> {
        summarize(self)
    }
}

impl Summarize for [f64] {
    fn summary(&self) -> Result<CellSummary> {
        summarize_values(self)
    }
}

impl Summarize for Vec<f64> {
    fn summary(&self) -> Result<CellSummary> {
        summarize_values(self)
    }
}

pub fn summarize(series: &CellSeries) -> Result<CellSummary> {
    series.validate()?;
    summarize_values(&series.values)
}

/// Mean and `(n - 1)`-denominator standard deviation.
pub fn summarize_values(values: &[f64]) -> Result<CellSummary> {
    if values.is_empty() {
        return Err(StatsError::Insufficient("cannot summarize an empty series".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    CellSummary::new(mean, sd, n)
}
