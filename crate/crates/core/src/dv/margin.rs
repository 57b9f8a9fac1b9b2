//! Margin weighting, the decoder-visible margin hinge and asymmetric PCGrad.

use serde::{Deserialize, Serialize};
use tensor::{DualValue, Tensor, Var};

use crate::batch::TrajectoryBatch;
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::nn::{bind_hidden, Graph};

/// Stand-in for `-inf` when excluding the gold logit from the runner-up max.
const MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginWeightConfig {
    /// Sigmoid sharpness.
    pub gamma: f64,
    /// Quantile of the batch margins used as the threshold.
    pub q: f64,
}

impl Default for MarginWeightConfig {
    fn default() -> Self {
        Self { gamma: 1.0, q: 0.5 }
    }
}

/// `(flat state position, gold token)` pairs: the state at `t - 1` predicts the label at `t`.
pub fn supervised_positions(batch: &TrajectoryBatch) -> Vec<(usize, usize)> {
    let Some(labels) = batch.labels() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (b, row) in labels.iter().enumerate() {
        for (t, y) in row.iter().enumerate().skip(1) {
            if let Some(y) = y {
                out.push((batch.flat(b, t - 1), *y));
            }
        }
    }
    out
}

/// `z_y - max_{v != y} z_v`.
pub fn margin_of(z: &[f64], y: usize) -> f64 {
    let other = z
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    z[y] - other
}

/// Linearly interpolated quantile of `values` (sorted in place).
pub fn quantile_linear(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (pos - lo as f64) * (values[hi] - values[lo]))
}

/// Per-position weights `sigmoid(gamma (tau - m))` with `tau` the batch margin quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginWeights {
    /// One weight per input position; positions without a finite margin keep weight 1.
    pub weights: Vec<f64>,
    pub tau: Option<f64>,
}

impl MarginWeights {
    /// True when no position had a finite margin.
    pub fn is_empty(&self) -> bool {
        self.tau.is_none()
    }
}

/// Weights for `logits: [N, V]` with optional gold labels per row.
pub fn margin_weights(logits: &Tensor, labels: &[Option<usize>], cfg: MarginWeightConfig) -> Result<MarginWeights> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(KitError::Config("margin weights need [N, V] logits and N labels".into()));
    }
    let vocab = logits.shape()[1];
    let margins: Vec<Option<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let y = (*y)?;
            if y >= vocab {
                return None;
            }
            Some(margin_of(logits.row(i), y)).filter(|m| m.is_finite())
        })
        .collect();
    let mut finite: Vec<f64> = margins.iter().flatten().copied().collect();
    let tau = quantile_linear(&mut finite, cfg.q);
    let weights = margins
        .iter()
        .map(|m| match (m, tau) {
            (Some(m), Some(tau)) => tensor::sigmoid(cfg.gamma * (tau - m)),
            _ => 1.0,
        })
        .collect();
    Ok(MarginWeights { weights, tau })
}

/// Margin weights at every flat position of `batch`, read against the label each state predicts.
pub fn batch_margin_weights(batch: &TrajectoryBatch, head: &ToyLMHead, cfg: MarginWeightConfig) -> Result<MarginWeights> {
    let n = batch.batch_size() * batch.seq_len();
    let mut labels = vec![None; n];
    for (pos, y) in supervised_positions(batch) {
        labels[pos] = Some(y);
    }
    let flat = batch.hidden().reshape(&[n, batch.dim()])?;
    let logits = flat.matmul(&head.weight().transpose()?)?;
    margin_weights(&logits, &labels, cfg)
}

/// `max(0, m - z_y + max_{j != y} z_j)` for one logit vector.
pub fn margin_hinge_value(z: &[f64], y: usize, m: f64) -> f64 {
    (m - margin_of(z, y)).max(0.0)
}

/// Mean hinge over rows of `z: [N, V]` with gold labels; result is a scalar.
pub fn hinge_on(g: &mut Graph, z: Var, labels: &[usize], m: f64) -> Result<Var> {
    let (n, vocab) = (g.tape.shape(z)[0], g.tape.shape(z)[1]);
    let gold: Vec<usize> = labels.iter().enumerate().map(|(i, y)| i * vocab + y).collect();
    let mut mask = Tensor::zeros(&[n, vocab]);
    for &k in &gold {
        mask.data_mut()[k] = MASK;
    }
    let zy = g.tape.take(z, &gold)?;
    let mc = g.constant(mask);
    let masked = g.tape.add(z, mc)?;
    let other = g.tape.max_axis(masked, 1)?;
    let gap = g.tape.sub(other, zy)?;
    let gap = g.tape.add_scalar(gap, m);
    let hinge = g.tape.clamp_min(gap, 0.0);
    Ok(g.tape.mean_all(hinge))
}

/// Hinge on the frozen head's logits at every supervised position (not EOS-clipped).
pub(crate) fn hinge_term(g: &mut Graph, hf: Var, batch: &TrajectoryBatch, head: &ToyLMHead, m: f64) -> Result<Option<Var>> {
    let sup = supervised_positions(batch);
    if sup.is_empty() {
        return Ok(None);
    }
    if let Some(&(_, y)) = sup.iter().find(|(_, y)| *y >= head.vocab()) {
        return Err(KitError::Batch(format!("label {y} outside vocabulary of {}", head.vocab())));
    }
    let pos: Vec<usize> = sup.iter().map(|s| s.0).collect();
    let labels: Vec<usize> = sup.iter().map(|s| s.1).collect();
    let h = g.tape.index_select(hf, 0, &pos)?;
    let z = head.logits_on(&mut g.tape, h)?;
    Ok(Some(hinge_on(g, z, &labels, m)?))
}

/// Mean margin hinge over supervised positions; none is flagged empty.
pub fn dv_margin_hinge(batch: &TrajectoryBatch, head: &ToyLMHead, m: f64) -> Result<DualValue> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    match hinge_term(&mut g, hf, batch, head, m)? {
        Some(root) => g.finish(root),
        None => Ok(g.empty()),
    }
}

pub const PCGRAD_EPS: f64 = 1e-12;

/// Remove the component of `g_aux` that conflicts with `g_ce`; non-conflicting input is returned as is.
pub fn pcgrad(g_aux: &[f64], g_ce: &[f64], eps: f64) -> Result<Vec<f64>> {
    if g_aux.len() != g_ce.len() {
        return Err(KitError::Config(format!(
            "gradient lengths differ: {} vs {}",
            g_aux.len(),
            g_ce.len()
        )));
    }
    let dot: f64 = g_aux.iter().zip(g_ce).map(|(a, b)| a * b).sum();
    if dot >= 0.0 {
        return Ok(g_aux.to_vec());
    }
    let n2: f64 = g_ce.iter().map(|x| x * x).sum();
    let c = dot / (n2 + eps);
    Ok(g_aux.iter().zip(g_ce).map(|(a, b)| a - c * b).collect())
}
