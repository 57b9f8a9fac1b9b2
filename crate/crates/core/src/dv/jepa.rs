//! Decoder-visible JEPA: multi-horizon KL through the frozen head plus a margin hinge.

use rand::Rng;
use tensor::{DualValue, Tensor, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::{KitError, Result};
use crate::head::{softmax_vec, ToyLMHead};
use crate::nn::{bind_hidden, Graph, Init, Mlp, Module, Param};

use super::margin::hinge_term;

pub const DV_WIDTH: usize = 512;
pub const DV_HORIZONS: [usize; 3] = [2, 3, 4];

/// `q(h, k) = h + MLP(h + e_k)` with a zero-initialised output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DvJepaHead {
    pub mlp: Mlp,
    /// `[|K|, D]`, one row per horizon.
    pub horizon_emb: Param,
    pub horizons: Vec<usize>,
    pub tau_kl: f64,
    pub margin: f64,
    pub beta: f64,
}

impl DvJepaHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, horizons: &[usize], rng: &mut R) -> Result<Self> {
        if horizons.is_empty() || horizons.iter().any(|&k| k < 2) {
            return Err(KitError::Config(format!("horizons must be non-empty and >= 2, got {horizons:?}")));
        }
        let mlp = Mlp::new("dvjepa.mlp", dim, DV_WIDTH, dim, Init::Zeros, rng);
        let emb = Init::Gaussian(0.02).tensor(&[horizons.len(), dim], dim, rng);
        Ok(Self {
            mlp,
            horizon_emb: Param::new("dvjepa.horizon", emb),
            horizons: horizons.to_vec(),
            tau_kl: 1.0,
            margin: 1.0,
            beta: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.l1.input_dim()
    }

    /// `q(h, k)` for `h: [N, D]` and the horizon at index `slot`.
    pub fn forward(&self, g: &mut Graph, h: Var, slot: usize) -> Result<Var> {
        let emb = g.param(&self.horizon_emb);
        let e = g.tape.index_select(emb, 0, &[slot])?;
        let x = g.tape.add(h, e)?;
        let r = self.mlp.forward(g, x)?;
        Ok(g.tape.add(h, r)?)
    }

    pub fn eval(&self, h: &[f64], slot: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        let e = self.horizon_emb.value.row(slot);
        let x: Vec<f64> = h.iter().zip(e).map(|(a, b)| a + b).collect();
        let r = self.mlp.eval(&Tensor::new(vec![1, d], x)?)?;
        Ok(h.iter().zip(r.data()).map(|(a, b)| a + b).collect())
    }
}

impl Module for DvJepaHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.mlp.params();
        v.push(&self.horizon_emb);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.mlp.params_mut();
        v.push(&mut self.horizon_emb);
        v
    }
}

/// `(row, anchor, anchor + k)` flat pairs: anchor inside the clipped span, target inside the row's span.
pub fn horizon_pairs(batch: &TrajectoryBatch, clip: &ClippedSpan, k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (b, r) in clip.active() {
        let end = batch.spans()[b].hi;
        for t in r.lo..r.hi {
            if t + k < end {
                out.push((batch.flat(b, t), batch.flat(b, t + k)));
            }
        }
    }
    out
}

fn kl_term(
    g: &mut Graph,
    hf: Var,
    target: &TrajectoryBatch,
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    head: &ToyLMHead,
    dv: &DvJepaHead,
) -> Result<Option<Var>> {
    let d = batch.dim();
    let th = target.hidden().data();
    let mut parts = Vec::new();
    for (slot, &k) in dv.horizons.iter().enumerate() {
        let pairs = horizon_pairs(batch, clip, k);
        if pairs.is_empty() {
            continue;
        }
        let anchors: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        // stop-gradient targets are computed outside the tape
        let mut tgt = Vec::with_capacity(pairs.len() * head.vocab());
        let mut neg_ent = 0.0;
        for &(_, j) in &pairs {
            let p = softmax_vec(&head.logits_of(&th[j * d..(j + 1) * d]), dv.tau_kl);
            neg_ent += p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            tgt.extend(p);
        }
        let n = pairs.len();
        let h = g.tape.index_select(hf, 0, &anchors)?;
        let q = dv.forward(g, h, slot)?;
        let z = head.logits_on(&mut g.tape, q)?;
        let lq = g.tape.log_softmax(z, dv.tau_kl)?;
        let pc = g.constant(Tensor::new(vec![n, head.vocab()], tgt)?);
        let cross = g.tape.mul(pc, lq)?;
        let cross = g.tape.sum_all(cross);
        let kl = g.tape.neg(cross);
        let kl = g.tape.add_scalar(kl, neg_ent);
        parts.push(g.tape.scale(kl, 1.0 / n as f64));
    }
    crate::traj::jacobi::mean_of(g, &parts)
}

fn check_dims(batch: &TrajectoryBatch, head: &ToyLMHead, dv: &DvJepaHead) -> Result<()> {
    if head.dim() != batch.dim() || dv.dim() != batch.dim() {
        return Err(KitError::Config(format!(
            "head dim {} / predictor dim {} must match batch dim {}",
            head.dim(),
            dv.dim(),
            batch.dim()
        )));
    }
    Ok(())
}

/// Mean over horizons of the mean KL(sg target || prediction) over anchor pairs.
pub fn dv_jepa_kl(batch: &TrajectoryBatch, clip: &ClippedSpan, head: &ToyLMHead, dv: &DvJepaHead) -> Result<DualValue> {
    dv_jepa_kl_against(batch, batch, clip, head, dv)
}

/// [`dv_jepa_kl`] with target distributions read from `target`.
pub fn dv_jepa_kl_against(
    batch: &TrajectoryBatch,
    target: &TrajectoryBatch,
    clip: &ClippedSpan,
    head: &ToyLMHead,
    dv: &DvJepaHead,
) -> Result<DualValue> {
    check_dims(batch, head, dv)?;
    let mut g = Graph::new();
    g.bind_all(dv);
    let hf = bind_hidden(&mut g, batch)?;
    match kl_term(&mut g, hf, target, batch, clip, head, dv)? {
        Some(root) => g.finish(root),
        None => Ok(g.empty()),
    }
}

/// `KL + beta * hinge`; either part may be absent, both absent is flagged empty.
pub fn dv_jepa_loss(batch: &TrajectoryBatch, clip: &ClippedSpan, head: &ToyLMHead, dv: &DvJepaHead) -> Result<DualValue> {
    dv_jepa_loss_against(batch, batch, clip, head, dv)
}

/// [`dv_jepa_loss`] with KL targets read from `target`.
pub fn dv_jepa_loss_against(
    batch: &TrajectoryBatch,
    target: &TrajectoryBatch,
    clip: &ClippedSpan,
    head: &ToyLMHead,
    dv: &DvJepaHead,
) -> Result<DualValue> {
    check_dims(batch, head, dv)?;
    let mut g = Graph::new();
    g.bind_all(dv);
    let hf = bind_hidden(&mut g, batch)?;
    let kl = kl_term(&mut g, hf, target, batch, clip, head, dv)?;
    let hinge = hinge_term(&mut g, hf, batch, head, dv.margin)?;
    let root = match (kl, hinge) {
        (None, None) => return Ok(g.empty()),
        (Some(k), None) => k,
        (None, Some(h)) => g.tape.scale(h, dv.beta),
        (Some(k), Some(h)) => {
            let h = g.tape.scale(h, dv.beta);
            g.tape.add(k, h)?
        }
    };
    g.finish(root)
}
