//! Total-loss composition `L_LM + lambda(t) L_aux` and the warm-up/plateau/decay schedule.

use serde::{Deserialize, Serialize};
use tensor::DualValue;

use crate::batch::TrajectoryBatch;
use crate::dv::supervised_positions;
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::nn::{bind_hidden, Graph};

/// Flag set when a step past the end of the schedule was clamped.
pub const CLAMPED: &str = "clamped";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lambda0: f64,
    pub steps: usize,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub floor_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lambda0: 1.0, steps: 200, warmup_frac: 0.25, decay_frac: 0.25, floor_ratio: 0.1 }
    }
}

impl ScheduleConfig {
    pub fn new(lambda0: f64, steps: usize) -> Result<Self> {
        let cfg = Self { lambda0, steps, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(KitError::Config(format!("lambda0 must be finite and >= 0, got {}", self.lambda0)));
        }
        if !frac_ok(self.warmup_frac) || !frac_ok(self.decay_frac) || self.warmup_frac + self.decay_frac > 1.0 {
            return Err(KitError::Config(format!(
                "warmup_frac + decay_frac must lie in [0, 1], got {} + {}",
                self.warmup_frac, self.decay_frac
            )));
        }
        if !frac_ok(self.floor_ratio) {
            return Err(KitError::Config(format!("floor_ratio must lie in [0, 1], got {}", self.floor_ratio)));
        }
        Ok(())
    }

    /// End of the warm-up ramp, `warmup_frac * T`.
    pub fn warmup_end(&self) -> f64 {
        self.warmup_frac * self.steps as f64
    }

    /// Start of the decay ramp, `T - decay_frac * T`.
    pub fn decay_start(&self) -> f64 {
        self.steps as f64 * (1.0 - self.decay_frac)
    }

    /// Weight at step `t` and whether `t` was past `T` and clamped.
    pub fn lambda_flagged(&self, t: usize) -> (f64, bool) {
        let total = self.steps as f64;
        let clamped = t > self.steps;
        let x = (t as f64).min(total);
        let (tw, td) = (self.warmup_end(), self.decay_start());
        let floor = self.lambda0 * self.floor_ratio;
        let v = if x < tw {
            self.lambda0 * x / tw
        } else if x < td || total <= td {
            self.lambda0
        } else {
            self.lambda0 + (floor - self.lambda0) * (x - td) / (total - td)
        };
        (v, clamped)
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambda_flagged(t).0
    }
}

/// `lm + lambda(t) * aux`, with gradients merged by leaf name. An empty auxiliary contributes nothing.
pub fn total_loss(lm: &DualValue, aux: &DualValue, cfg: &ScheduleConfig, t: usize) -> Result<DualValue> {
    let (lambda, clamped) = cfg.lambda_flagged(t);
    let mut out = if aux.has_flag(crate::nn::EMPTY) {
        let mut out = lm.clone();
        out.flags.extend(aux.flags.iter().cloned());
        out
    } else {
        lm.combine(1.0, aux, lambda)?
    };
    if clamped {
        out.flags.insert(CLAMPED.into());
    }
    Ok(out)
}

/// Mean next-token negative log-likelihood of the head over every supervised position.
pub fn toy_ce_loss(batch: &TrajectoryBatch, head: &ToyLMHead) -> Result<DualValue> {
    let sup = supervised_positions(batch);
    if sup.is_empty() {
        return Err(KitError::Insufficient("cross-entropy needs labelled positions".into()));
    }
    if head.dim() != batch.dim() {
        return Err(KitError::Config(format!("head dim {} does not match batch dim {}", head.dim(), batch.dim())));
    }
    let vocab = head.vocab();
    if let Some(&(_, y)) = sup.iter().find(|(_, y)| *y >= vocab) {
        return Err(KitError::Batch(format!("label {y} outside vocabulary of {vocab}")));
    }
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let pos: Vec<usize> = sup.iter().map(|s| s.0).collect();
    let gold: Vec<usize> = sup.iter().enumerate().map(|(i, s)| i * vocab + s.1).collect();
    let h = g.tape.index_select(hf, 0, &pos)?;
    let z = head.logits_on(&mut g.tape, h)?;
    let ls = g.tape.log_softmax(z, head.temperature)?;
    let picked = g.tape.take(ls, &gold)?;
    let m = g.tape.mean_all(picked);
    let root = g.tape.neg(m);
    g.finish(root)
}
