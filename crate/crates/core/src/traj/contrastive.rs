//! Symmetric InfoNCE between the two halves of each span.

use rand::Rng;
use tensor::{DualValue, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::Result;
use crate::nn::{bind_hidden, pooling_matrix, Graph, Init, Mlp, Module, Param};

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveProjector {
    pub mlp: Mlp,
    pub tau: f64,
}

impl ContrastiveProjector {
    pub fn new<R: Rng + ?Sized>(dim: usize, out: usize, tau: f64, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new("contrastive", dim, dim, out, Init::Xavier, rng),
            tau,
        }
    }
}

impl Module for ContrastiveProjector {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// `0.5 * (CE(A B^T / tau, diag) + CE(B A^T / tau, diag))` over unit-normalised rows.
pub fn info_nce_symmetric(g: &mut Graph, za: Var, zb: Var, tau: f64) -> Result<Var> {
    let n = g.tape.shape(za)[0];
    let zbt = g.tape.transpose(zb)?;
    let sim = g.tape.matmul(za, zbt)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let lab = g.tape.log_softmax(sim, tau)?;
    let pa = g.tape.take(lab, &diag)?;
    let simt = g.tape.transpose(sim)?;
    let lba = g.tape.log_softmax(simt, tau)?;
    let pb = g.tape.take(lba, &diag)?;
    let both = g.tape.add(pa, pb)?;
    let m = g.tape.mean_all(both);
    Ok(g.tape.scale(m, -0.5))
}

/// One-directional InfoNCE `CE(A B^T / tau, diag)` for unit rows.
pub fn info_nce(g: &mut Graph, za: Var, zb: Var, tau: f64) -> Result<Var> {
    let n = g.tape.shape(za)[0];
    let zbt = g.tape.transpose(zb)?;
    let sim = g.tape.matmul(za, zbt)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let ls = g.tape.log_softmax(sim, tau)?;
    let p = g.tape.take(ls, &diag)?;
    let m = g.tape.mean_all(p);
    Ok(g.tape.neg(m))
}

/// Flat positions of the two halves split at `lo + floor(L/2)`, for rows where both are non-empty.
pub fn halves(batch: &TrajectoryBatch, clip: &ClippedSpan) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    clip.active()
        .filter(|(_, r)| r.len() >= 2)
        .map(|(b, r)| {
            let mid = r.lo + r.len() / 2;
            (
                b,
                (r.lo..mid).map(|t| batch.flat(b, t)).collect(),
                (mid..r.hi).map(|t| batch.flat(b, t)).collect(),
            )
        })
        .collect()
}

pub fn contrastive_loss(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    proj: &ContrastiveProjector,
) -> Result<DualValue> {
    let mut g = Graph::new();
    g.bind_all(proj);
    let hf = bind_hidden(&mut g, batch)?;
    let rows = halves(batch, clip);
    if rows.len() < 2 {
        return Ok(g.empty());
    }
    let width = batch.batch_size() * batch.seq_len();
    let pa = pooling_matrix(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), width);
    let pb = pooling_matrix(&rows.iter().map(|r| r.2.clone()).collect::<Vec<_>>(), width);
    let pa = g.constant(pa);
    let pb = g.constant(pb);
    let mu_a = g.tape.matmul(pa, hf)?;
    let mu_b = g.tape.matmul(pb, hf)?;
    let za = proj.mlp.forward(&mut g, mu_a)?;
    let zb = proj.mlp.forward(&mut g, mu_b)?;
    let za = g.tape.normalize_rows(za)?;
    let zb = g.tape.normalize_rows(zb)?;
    let root = info_nce_symmetric(&mut g, za, zb, proj.tau)?;
    g.finish(root)
}
