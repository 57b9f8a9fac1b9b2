//! Experiment configuration: TOML-style sections or JSON, with command-line overrides.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tubekit::demo::DemoConfig;
use tubekit::registry::{LossKind, LossParams};
use tubekit::schedule::ScheduleConfig;
use tubekit::SynthConfig;

use crate::error::{CliError, Result};

/// Schedule shape; peak weight and length live at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleShape {
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub floor_ratio: f64,
}

impl Default for ScheduleShape {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        Self { warmup_frac: d.warmup_frac, decay_frac: d.decay_frac, floor_ratio: d.floor_ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub loss: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Peak auxiliary weight; the loss default when absent.
    pub lambda0: Option<f64>,
    pub lr: f64,
    pub clip_margin: usize,
    pub min_len: usize,
    pub schedule: ScheduleShape,
    pub synth: SynthConfig,
    pub params: LossParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let demo = DemoConfig::default();
        Self {
            loss: demo.loss.id().to_string(),
            seeds: vec![0],
            steps: demo.schedule.steps,
            lambda0: None,
            lr: demo.lr,
            clip_margin: demo.clip_margin,
            min_len: demo.min_len,
            schedule: ScheduleShape::default(),
            synth: demo.synth,
            params: demo.params,
        }
    }
}

/// Values given on the command line; each one wins over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub steps: Option<usize>,
    pub lambda0: Option<f64>,
    pub lr: Option<f64>,
    pub curvature: Option<f64>,
    pub scales: Option<Vec<usize>>,
}

impl ExperimentConfig {
    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Config file (if any) under the defaults, then command-line overrides.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(l) = &o.loss {
            self.loss = l.clone();
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        } else if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = o.steps {
            self.steps = s;
        }
        if o.lambda0.is_some() {
            self.lambda0 = o.lambda0;
        }
        if let Some(lr) = o.lr {
            self.lr = lr;
        }
        if let Some(c) = o.curvature {
            self.synth.curvature = c;
        }
        if let Some(s) = &o.scales {
            self.params.scales = s.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<LossKind> {
        Ok(self.loss.parse()?)
    }

    /// Peak weight after falling back to the loss default.
    pub fn lambda0(&self) -> Result<f64> {
        Ok(self.lambda0.unwrap_or(self.kind()?.default_lambda0()))
    }

    pub fn demo_config(&self) -> Result<DemoConfig> {
        let schedule = ScheduleConfig {
            lambda0: self.lambda0()?,
            steps: self.steps,
            warmup_frac: self.schedule.warmup_frac,
            decay_frac: self.schedule.decay_frac,
            floor_ratio: self.schedule.floor_ratio,
        };
        Ok(DemoConfig {
            loss: self.kind()?,
            params: self.params.clone(),
            schedule,
            synth: self.synth.clone(),
            lr: self.lr,
            clip_margin: self.clip_margin,
            min_len: self.min_len,
        })
    }

    /// The configuration as echoed into run records, with the peak weight filled in.
    pub fn echo(&self) -> Result<serde_json::Value> {
        let mut c = self.clone();
        c.lambda0 = Some(self.lambda0()?);
        Ok(serde_json::to_value(c)?)
    }
}
