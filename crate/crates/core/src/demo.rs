//! Toy descent loop: plain gradient descent on hidden states and auxiliary heads
//! against `L_CE + lambda(t) L_aux`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::{DualValue, Tensor};

use crate::batch::{eos_clip, TrajectoryBatch};
use crate::diagnostics::{diagnose, hidden_gradient, DiagnosticsReport, DEFAULT_MAX_PAIRS};
use crate::dv::{pcgrad, PCGRAD_EPS};
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::nn::{Module, HIDDEN};
use crate::registry::{AuxLoss, LossKind, LossParams};
use crate::schedule::{toy_ce_loss, total_loss, ScheduleConfig};
use crate::synth::{synth_batch, SynthConfig};
use crate::traj::layer_leaf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub schedule: ScheduleConfig,
    pub synth: SynthConfig,
    /// Step size for hidden states and auxiliary heads.
    pub lr: f64,
    pub clip_margin: usize,
    pub min_len: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Jfr,
            params: LossParams::default(),
            schedule: ScheduleConfig::default(),
            synth: SynthConfig::default(),
            lr: 0.05,
            clip_margin: 2,
            min_len: 3,
        }
    }
}

impl DemoConfig {
    /// Defaults for `loss`, with its default peak weight.
    pub fn for_loss(loss: LossKind) -> Self {
        let mut cfg = Self { loss, ..Self::default() };
        cfg.schedule.lambda0 = loss.default_lambda0();
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub lambda: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRun {
    pub steps: Vec<StepRecord>,
    pub diagnostics: DiagnosticsReport,
}

impl DemoRun {
    /// Relative drop of the auxiliary component from step 0 to the last step.
    pub fn aux_reduction(&self) -> Option<f64> {
        let first = self.steps.first()?.aux_loss;
        let last = self.steps.last()?.aux_loss;
        (first > 0.0).then(|| 1.0 - last / first)
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(KitError::Divergence(format!("{what} is {v} at step {step}")))
    }
}

fn descend(x: &Tensor, g: &Tensor, lr: f64) -> Result<Tensor> {
    Ok(x.zip_map(g, |a, d| a - lr * d)?)
}

/// Gradient on every leaf the batch owns: hidden states and each layer tensor.
struct StateGrads {
    hidden: Tensor,
    layers: Vec<(usize, Tensor)>,
}

fn state_grads(d: &DualValue, batch: &TrajectoryBatch) -> StateGrads {
    let zero = || Tensor::zeros(batch.hidden().shape());
    StateGrads {
        hidden: d.grad(HIDDEN).cloned().unwrap_or_else(zero),
        layers: batch
            .layers()
            .keys()
            .map(|&l| (l, d.grad(&layer_leaf(l)).cloned().unwrap_or_else(zero)))
            .collect(),
    }
}

/// Applies one descent step to the states. Layers that alias `hidden` move together with it.
fn step_states(batch: &mut TrajectoryBatch, grads: &StateGrads, lr: f64) -> Result<()> {
    let aliased: Vec<usize> = batch.layers().iter().filter(|(_, t)| *t == batch.hidden()).map(|(l, _)| *l).collect();
    let mut gh = grads.hidden.clone();
    for (l, g) in &grads.layers {
        if aliased.contains(l) {
            gh = gh.zip_map(g, |a, b| a + b)?;
        }
    }
    let new_hidden = descend(batch.hidden(), &gh, lr)?;
    for (l, g) in &grads.layers {
        let next = if aliased.contains(l) { new_hidden.clone() } else { descend(batch.layer(*l)?, g, lr)? };
        batch.set_layer(*l, next)?;
    }
    batch.set_hidden(new_hidden)
}

/// Runs the descent loop on a synthetic batch drawn with `seed`.
pub fn train_demo(cfg: &DemoConfig, seed: u64) -> Result<DemoRun> {
    train_demo_state(cfg, seed).map(|(run, _, _)| run)
}

/// As [`train_demo`], also returning the trained auxiliary loss and the final batch.
pub fn train_demo_state(cfg: &DemoConfig, seed: u64) -> Result<(DemoRun, AuxLoss, TrajectoryBatch)> {
    cfg.schedule.validate()?;
    if cfg.schedule.steps == 0 {
        return Err(KitError::Config("steps must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(KitError::Config(format!("lr must be positive, got {}", cfg.lr)));
    }
    let mut batch = synth_batch(&cfg.synth, seed)?;
    let head: ToyLMHead = cfg.synth.reference_head();
    let clip = eos_clip(&batch, cfg.clip_margin, cfg.min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_0000_0000_0001);
    let aux_head = cfg.loss.needs_head().then(|| head.clone());
    let mut aux = AuxLoss::new(cfg.loss, cfg.params.clone(), batch.dim(), aux_head, &mut rng)?;
    let has_labels = batch.labels().is_some();

    let mut steps = Vec::with_capacity(cfg.schedule.steps);
    for t in 0..cfg.schedule.steps {
        let a = aux.evaluate(&batch, &clip, &mut rng)?;
        let lm = if has_labels { toy_ce_loss(&batch, &head)? } else { DualValue::constant(0.0) };
        check_finite(t, "auxiliary loss", a.value)?;
        check_finite(t, "cross-entropy", lm.value)?;
        let (lambda, _) = cfg.schedule.lambda_flagged(t);
        let mut tot = total_loss(&lm, &a, &cfg.schedule, t)?;
        check_finite(t, "total loss", tot.value)?;

        let mut grads = state_grads(&tot, &batch);
        if cfg.params.pcgrad && has_labels {
            let ga = hidden_gradient(&a, &batch);
            let gc = hidden_gradient(&lm, &batch);
            let projected = pcgrad(ga.data(), gc.data(), PCGRAD_EPS)?;
            let mixed: Vec<f64> = gc.data().iter().zip(&projected).map(|(c, p)| c + lambda * p).collect();
            grads = StateGrads {
                hidden: Tensor::new(gc.shape().to_vec(), mixed)?,
                layers: grads.layers.into_iter().map(|(l, g)| (l, g.map(|_| 0.0))).collect(),
            };
            tot.flags.insert("pcgrad".into());
        }
        if !grads.hidden.is_finite() || grads.layers.iter().any(|(_, g)| !g.is_finite()) {
            return Err(KitError::Divergence(format!("non-finite state gradient at step {t}")));
        }
        step_states(&mut batch, &grads, cfg.lr)?;
        aux.sgd_step(&tot, cfg.lr)?;
        aux.after_step(&batch, &clip);

        steps.push(StepRecord {
            step: t,
            lm_loss: lm.value,
            aux_loss: a.value,
            lambda,
            total: tot.value,
            flags: tot.flags.clone(),
        });
    }
    let diagnostics = diagnose(&batch, &clip, Some(&aux), Some(&head), DEFAULT_MAX_PAIRS, &mut rng)?;
    Ok((DemoRun { steps, diagnostics }, aux, batch))
}

/// Peak weight and step size per loss for the 200-step descent fixture, from a
/// calibration run on seed 0 of the default synthetic batch.
pub const CALIBRATED_DEMO: [(LossKind, f64, f64); 6] = [
    (LossKind::Stp, 1.0, 0.05),
    (LossKind::Jfr, 100.0, 0.05),
    (LossKind::MstbJfr, 100.0, 0.05),
    (LossKind::SigregState, 10.0, 0.5),
    (LossKind::VicregVc, 1.0, 0.2),
    (LossKind::DvJepa, 1.0, 0.05),
];

/// The calibrated fixture configuration for `loss`, if it has one.
pub fn calibrated(loss: LossKind) -> Option<DemoConfig> {
    CALIBRATED_DEMO.iter().find(|c| c.0 == loss).map(|&(_, lambda0, lr)| {
        let mut cfg = DemoConfig::for_loss(loss);
        cfg.schedule.lambda0 = lambda0;
        cfg.lr = lr;
        cfg
    })
}
