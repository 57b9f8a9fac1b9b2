//! Synthetic hidden-state trajectories.
//!
//! Each row follows `h(t) = o + (t - lo) * s * d + c * w(t)` over the whole
//! sequence, where `o` is a random origin, `d` a random unit direction, and
//! `w` a two-frequency sinusoidal deflection whose periods are tied to the span
//! length. With `c = 0` every row is an equal-step straight ray.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tensor::Tensor;

use crate::batch::{Span, TrajectoryBatch};
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpanPolicy {
    /// Every row has the same span length; start positions vary.
    Fixed { len: usize },
    /// Lengths drawn uniformly from `[min, max]`.
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub vocab: usize,
    pub curvature: f64,
    pub span: SpanPolicy,
    /// Minimum number of prompt positions before each span.
    pub prompt: usize,
    pub step: f64,
    pub noise: f64,
    /// Layer indices of the synthetic stack; the last one equals `hidden`.
    pub layers: Vec<usize>,
    pub labels: bool,
    pub head_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            seq_len: 48,
            dim: 32,
            vocab: 64,
            curvature: 0.5,
            span: SpanPolicy::Fixed { len: 24 },
            prompt: 4,
            step: 0.25,
            noise: 0.0,
            layers: vec![4, 8, 12, 16],
            labels: true,
            head_seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn with_shape(mut self, batch: usize, seq_len: usize, dim: usize) -> Self {
        self.batch = batch;
        self.seq_len = seq_len;
        self.dim = dim;
        self
    }

    pub fn with_curvature(mut self, c: f64) -> Self {
        self.curvature = c;
        self
    }

    pub fn with_span(mut self, span: SpanPolicy) -> Self {
        self.span = span;
        self
    }

    /// The reference head used to derive labels.
    pub fn reference_head(&self) -> ToyLMHead {
        ToyLMHead::seeded(self.vocab, self.dim, self.head_seed)
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if !(0.0..=1.0).contains(&self.curvature) {
            return Err(KitError::Config(format!(
                "curvature must lie in [0, 1], got {}",
                self.curvature
            )));
        }
        if self.batch == 0 || self.dim == 0 {
            return Err(KitError::Config("batch and dim must be positive".into()));
        }
        let (min, max) = match self.span {
            SpanPolicy::Fixed { len } => (len, len),
            SpanPolicy::Range { min, max } => (min, max),
        };
        if min == 0 || min > max {
            return Err(KitError::Config(format!("bad span length range [{min}, {max}]")));
        }
        // prompt + span + one trailing end-of-turn position
        if self.prompt.max(1) + max + 1 > self.seq_len {
            return Err(KitError::Config(format!(
                "seq_len {} cannot hold a {}-token prompt, a {max}-token span and an end-of-turn position",
                self.seq_len,
                self.prompt.max(1)
            )));
        }
        Ok((min, max))
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic batch under `seed`.
pub fn synth_batch(cfg: &SynthConfig, seed: u64) -> Result<TrajectoryBatch> {
    let (min_len, max_len) = cfg.validate()?;
    let (b, s, d) = (cfg.batch, cfg.seq_len, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = cfg.prompt.max(1);
    let mut clean = vec![0.0; b * s * d];
    let mut spans = Vec::with_capacity(b);
    for row in 0..b {
        let len = rng.random_range(min_len..=max_len);
        let lo = rng.random_range(prompt..=s - 1 - len);
        spans.push(Span::new(lo, lo + len));
        let origin: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let dir = unit(&mut rng, d);
        let e1 = unit(&mut rng, d);
        let e2 = unit(&mut rng, d);
        let phase1 = rng.random_range(0.0..std::f64::consts::TAU);
        let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
        let period = len as f64;
        for t in 0..s {
            let tau = t as f64 - lo as f64;
            let w1 = (std::f64::consts::TAU * tau / period + phase1).sin();
            let w2 = 0.5 * (2.0 * std::f64::consts::TAU * tau / period + phase2).sin();
            let base = (row * s + t) * d;
            for j in 0..d {
                let mut x = origin[j] + tau * cfg.step * dir[j];
                if cfg.curvature != 0.0 {
                    x += cfg.curvature * (w1 * e1[j] + w2 * e2[j]);
                }
                clean[base + j] = x;
            }
        }
    }
    let mut hidden = clean.clone();
    if cfg.noise > 0.0 {
        for x in hidden.iter_mut() {
            *x += cfg.noise * gaussian(&mut rng);
        }
    }
    let hidden = Tensor::new(vec![b, s, d], hidden)?;
    let mut batch = TrajectoryBatch::new(hidden.clone(), spans.clone())?;
    let n_layers = cfg.layers.len();
    for (rank, &layer) in cfg.layers.iter().enumerate() {
        let passes = n_layers - 1 - rank;
        batch = batch.with_layer(layer, smooth(&hidden, passes))?;
    }
    if cfg.labels {
        let head = cfg.reference_head();
        let mut labels = vec![vec![None; s]; b];
        for (row, sp) in spans.iter().enumerate() {
            // tokens lo..=hi: the span plus its end-of-turn token, each predicted
            // from the clean state one position earlier
            for t in sp.lo..=sp.hi {
                let base = (row * s + t - 1) * d;
                let z = head.logits_of(&clean[base..base + d]);
                labels[row][t] = Some(argmax(&z));
            }
        }
        batch = batch.with_labels(labels)?;
    }
    Ok(batch)
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Interior three-point averaging along the sequence, `passes` times.
/// Affine sequences are fixed points.
fn smooth(h: &Tensor, passes: usize) -> Tensor {
    let (b, s, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut cur = h.clone();
    for _ in 0..passes {
        let prev = cur.clone();
        let src = prev.data();
        let dst = cur.data_mut();
        for row in 0..b {
            for t in 1..s.saturating_sub(1) {
                for j in 0..d {
                    let at = |tt: usize| src[(row * s + tt) * d + j];
                    let avg = 0.5 * (at(t - 1) + at(t + 1));
                    dst[(row * s + t) * d + j] = 0.5 * at(t) + 0.5 * avg;
                }
            }
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_batch(&cfg, 5).unwrap(), synth_batch(&cfg, 5).unwrap());
        assert_ne!(synth_batch(&cfg, 5).unwrap(), synth_batch(&cfg, 6).unwrap());
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let cfg = SynthConfig::default().with_shape(2, 20, 4);
        assert!(matches!(synth_batch(&cfg, 1), Err(KitError::Config(_))));
    }

    #[test]
    fn final_layer_equals_hidden() {
        let b = synth_batch(&SynthConfig::default(), 3).unwrap();
        assert_eq!(b.layer(16).unwrap(), b.hidden());
        assert_ne!(b.layer(4).unwrap(), b.hidden());
    }

    #[test]
    fn straight_rays_survive_smoothing() {
        let b = synth_batch(&SynthConfig::default().with_curvature(0.0), 3).unwrap();
        let l4 = b.layer(4).unwrap();
        let err = l4
            .data()
            .iter()
            .zip(b.hidden().data())
            .fold(0.0_f64, |m, (a, c)| m.max((a - c).abs()));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn labels_cover_span_and_end_of_turn() {
        let b = synth_batch(&SynthConfig::default(), 4).unwrap();
        let labels = b.labels().unwrap();
        for (row, sp) in b.spans().iter().enumerate() {
            for t in 0..b.seq_len() {
                assert_eq!(labels[row][t].is_some(), (sp.lo..=sp.hi).contains(&t));
            }
        }
    }

    #[test]
    fn range_policy_respects_bounds() {
        let cfg = SynthConfig::default().with_span(SpanPolicy::Range { min: 6, max: 30 });
        for seed in 0..20 {
            let b = synth_batch(&cfg, seed).unwrap();
            for sp in b.spans() {
                assert!((6..=30).contains(&sp.len()));
                assert!(sp.lo >= 4 && sp.hi < b.seq_len());
            }
        }
    }
}
