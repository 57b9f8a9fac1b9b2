//! Representation diagnostics: anisotropy, curvature, gradient cosine,
//! positional attribution and the active-but-inert verdict.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor::{DualValue, Tensor};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::nn::{bind_hidden, Graph, HIDDEN};
use crate::registry::{AuxLoss, LossKind, LossParams};
use crate::schedule::toy_ce_loss;
use crate::traj::jacobi::{self, Centroid};
use crate::traj::{layer_leaf, local_targets, MemoryBank};

pub const DEFAULT_MAX_PAIRS: usize = 2000;

/// Flag set when a gradient cosine had a zero-norm input.
pub const GRAD_COSINE_UNDEFINED: &str = "grad_cosine_undefined";

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unordered pair `(i, j)`, `i < j`, at lexicographic index `k` among all pairs of `n` items.
fn unrank_pair(k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    let mut rest = k;
    while rest >= n - 1 - i {
        rest -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + rest)
}

/// Mean pairwise cosine over `min(max_pairs, N(N-1)/2)` distinct pairs of rows of `states: [N, D]`.
/// Pairs involving a zero vector are skipped.
pub fn anisotropy<R: Rng + ?Sized>(states: &Tensor, max_pairs: usize, rng: &mut R) -> Result<f64> {
    if states.ndim() != 2 || states.shape()[0] < 2 {
        return Err(KitError::Insufficient("anisotropy needs at least two states".into()));
    }
    let n = states.shape()[0];
    let total = n * (n - 1) / 2;
    let m = max_pairs.min(total);
    if m == 0 {
        return Err(KitError::Config("max_pairs must be positive".into()));
    }
    let picks: Vec<usize> = if m == total {
        (0..total).collect()
    } else {
        let mut p = rand::seq::index::sample(rng, total, m).into_vec();
        p.sort_unstable();
        p
    };
    let norms: Vec<f64> = (0..n).map(|i| norm(states.row(i))).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for k in picks {
        let (i, j) = unrank_pair(k, n);
        if norms[i] == 0.0 || norms[j] == 0.0 {
            continue;
        }
        let c = dot(states.row(i), states.row(j)) / (norms[i] * norms[j]);
        sum += c.clamp(-1.0, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(KitError::Insufficient("every sampled pair contains a zero vector".into()));
    }
    Ok(sum / count as f64)
}

/// States inside the clipped spans, stacked as `[N, D]`.
pub fn span_states(batch: &TrajectoryBatch, clip: &ClippedSpan) -> Tensor {
    let d = batch.dim();
    let mut data = Vec::new();
    let mut n = 0;
    for (b, r) in clip.active() {
        for t in r.lo..r.hi {
            data.extend_from_slice(batch.state(b, t));
            n += 1;
        }
    }
    Tensor::new(vec![n, d], data).expect("sized above")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    /// Mean over rows of the mean turning angle, radians.
    pub mean: f64,
    pub rows: usize,
    /// Consecutive-velocity pairs skipped because a velocity had zero length.
    pub skipped: usize,
}

/// Mean angle between consecutive velocities, averaged per row then over rows.
pub fn curvature(batch: &TrajectoryBatch, clip: &ClippedSpan) -> Result<Curvature> {
    let (mut total, mut rows, mut skipped) = (0.0, 0usize, 0usize);
    for (b, r) in clip.active() {
        if r.len() < 3 {
            continue;
        }
        let vel: Vec<Vec<f64>> = (r.lo..r.hi - 1)
            .map(|t| batch.state(b, t + 1).iter().zip(batch.state(b, t)).map(|(x, y)| x - y).collect())
            .collect();
        let (mut s, mut c) = (0.0, 0usize);
        for w in vel.windows(2) {
            let (na, nb) = (norm(&w[0]), norm(&w[1]));
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            s += (dot(&w[0], &w[1]) / (na * nb)).clamp(-1.0, 1.0).acos();
            c += 1;
        }
        if c > 0 {
            total += s / c as f64;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(KitError::Insufficient("no row has two non-zero consecutive velocities".into()));
    }
    Ok(Curvature { mean: total / rows as f64, rows, skipped })
}

/// Cosine between two flat gradients; NaN when either has zero norm.
pub fn grad_cosine(g_aux: &[f64], g_ce: &[f64]) -> Result<f64> {
    if g_aux.len() != g_ce.len() {
        return Err(KitError::Config(format!(
            "gradient lengths differ: {} vs {}",
            g_aux.len(),
            g_ce.len()
        )));
    }
    let (na, nc) = (norm(g_aux), norm(g_ce));
    if na == 0.0 || nc == 0.0 || !na.is_finite() || !nc.is_finite() {
        return Ok(f64::NAN);
    }
    Ok((dot(g_aux, g_ce) / (na * nc)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Front,
    Middle,
    End,
}

/// Relative-position bucket of centre `t` in a clipped span of length `len`, by `(t + 0.5) / len`.
pub fn bucket_of(t: usize, len: usize) -> Bucket {
    // (t + 0.5) / len < k / 3  <=>  3 (2t + 1) < 2 k len, exact in integers
    let lhs = 3 * (2 * t + 1);
    if lhs < 2 * len {
        Bucket::Front
    } else if lhs < 4 * len {
        Bucket::Middle
    } else {
        Bucket::End
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketStat {
    /// `None` when the bucket received no stencil centre.
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Attribution {
    pub front: BucketStat,
    pub middle: BucketStat,
    pub end: BucketStat,
}

impl Attribution {
    pub fn get(&self, b: Bucket) -> &BucketStat {
        match b {
            Bucket::Front => &self.front,
            Bucket::Middle => &self.middle,
            Bucket::End => &self.end,
        }
    }

    pub fn total_count(&self) -> usize {
        self.front.count + self.middle.count + self.end.count
    }
}

/// Per-bucket sums and counts of `||D^2_delta J||^2` for one residual convention.
fn bucket_sums(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    centroid: Centroid<'_>,
    scales: &[usize],
) -> Result<[(f64, usize); 3]> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let set = jacobi::build(&mut g, hf, batch, clip, centroid, scales)?;
    let mut acc = [(0.0, 0usize); 3];
    for st in &set.scales {
        let rows = g.tape.value(st.rows);
        for (n, term) in st.terms.iter().enumerate() {
            let v: f64 = rows.row(n).iter().map(|x| x * x).sum();
            let slot = &mut acc[bucket_of(term.t, term.len) as usize];
            slot.0 += v;
            slot.1 += 1;
        }
    }
    Ok(acc)
}

/// Bucket means of the squared strided second differences of the Jacobi residual the
/// loss trains on. Layer-stacked variants are bucketed per layer, then averaged.
pub fn attribution(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    kind: LossKind,
    params: &LossParams,
    bank: Option<&MemoryBank>,
) -> Result<Attribution> {
    let acc = match kind {
        LossKind::Jfr => vec![bucket_sums(batch, clip, Centroid::Batch, &[1])?],
        LossKind::MstbJfr => {
            let centroid = match params.stencil_input {
                crate::traj::StencilInput::Residual => Centroid::Batch,
                crate::traj::StencilInput::Raw => Centroid::Raw,
            };
            vec![bucket_sums(batch, clip, centroid, &params.scales)?]
        }
        LossKind::LocalJfr => {
            let empty = MemoryBank::new(params.bank_capacity, params.bank_k, params.bank_tau)?;
            let targets = local_targets(batch, clip, bank.unwrap_or(&empty));
            vec![bucket_sums(batch, clip, Centroid::Local(&targets), &[1])?]
        }
        LossKind::DstJfr => {
            if params.layers.is_empty() {
                return Err(KitError::Config("layer-stacked attribution needs at least one layer".into()));
            }
            let mut out = Vec::with_capacity(params.layers.len());
            for &l in &params.layers {
                let layer = batch.with_hidden_from_layer(l)?;
                out.push(bucket_sums(&layer, clip, Centroid::Batch, &[1])?);
            }
            out
        }
        other => {
            return Err(KitError::Config(format!("`{other}` has no Jacobi residual to attribute")));
        }
    };
    let mut stats = [BucketStat::default(); 3];
    for (i, stat) in stats.iter_mut().enumerate() {
        let count = acc[0][i].1;
        let mean = if count == 0 {
            None
        } else {
            Some(acc.iter().map(|a| a[i].0 / a[i].1 as f64).sum::<f64>() / acc.len() as f64)
        };
        *stat = BucketStat { mean, count };
    }
    Ok(Attribution { front: stats[0], middle: stats[1], end: stats[2] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertThresholds {
    pub rho_max: f64,
    /// Exact-match tolerance in percentage points.
    pub em_eps: f64,
}

impl Default for InertThresholds {
    fn default() -> Self {
        Self { rho_max: 0.2, em_eps: 2.5 }
    }
}

/// Geometry moved, gradients nearly orthogonal to the task, and the task metric unchanged.
pub fn active_inert(delta_geometry: f64, rho: f64, delta_em: f64, th: InertThresholds) -> bool {
    delta_geometry > 0.0 && rho.abs() <= th.rho_max && delta_em.abs() <= th.em_eps
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub anisotropy: Option<f64>,
    pub curvature: Option<Curvature>,
    pub grad_cosine: Option<f64>,
    pub attribution: Option<Attribution>,
    pub flags: BTreeSet<String>,
}

/// Gradient of a loss with respect to the final-layer states, including any layer leaf
/// that carries the same tensor as `hidden`.
pub fn hidden_gradient(dual: &DualValue, batch: &TrajectoryBatch) -> Tensor {
    let mut g = dual.grad(HIDDEN).cloned().unwrap_or_else(|| Tensor::zeros(batch.hidden().shape()));
    for (l, t) in batch.layers() {
        if t == batch.hidden() {
            if let Some(lg) = dual.grad(&layer_leaf(*l)) {
                g = g.zip_map(lg, |a, b| a + b).expect("same shape as hidden");
            }
        }
    }
    g
}

/// Runs every diagnostic that the inputs allow, recording skipped ones as flags.
pub fn diagnose<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    aux: Option<&AuxLoss>,
    head: Option<&ToyLMHead>,
    max_pairs: usize,
    rng: &mut R,
) -> Result<DiagnosticsReport> {
    let mut rep = DiagnosticsReport::default();
    match anisotropy(&span_states(batch, clip), max_pairs, rng) {
        Ok(a) => rep.anisotropy = Some(a),
        Err(_) => {
            rep.flags.insert("anisotropy_unavailable".into());
        }
    }
    match curvature(batch, clip) {
        Ok(c) => {
            if c.skipped > 0 {
                rep.flags.insert("curvature_skipped_zero_velocity".into());
            }
            rep.curvature = Some(c);
        }
        Err(_) => {
            rep.flags.insert("curvature_unavailable".into());
        }
    }
    let Some(aux) = aux else {
        return Ok(rep);
    };
    if aux.kind.has_jacobi_residual() {
        rep.attribution = Some(attribution(batch, clip, aux.kind, &aux.params, aux.bank())?);
    }
    let head = head.or(aux.head());
    let ce = match head {
        Some(h) if batch.labels().is_some() => toy_ce_loss(batch, h).ok(),
        _ => None,
    };
    let Some(ce) = ce else {
        rep.flags.insert("grad_cosine_unavailable".into());
        return Ok(rep);
    };
    let a = aux.evaluate(batch, clip, rng)?;
    let rho = grad_cosine(hidden_gradient(&a, batch).data(), hidden_gradient(&ce, batch).data())?;
    if rho.is_nan() {
        rep.flags.insert(GRAD_COSINE_UNDEFINED.into());
    } else {
        rep.grad_cosine = Some(rho);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrank_enumerates_all_pairs_in_order() {
        let n = 7;
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                want.push((i, j));
            }
        }
        let got: Vec<_> = (0..want.len()).map(|k| unrank_pair(k, n)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn bucket_thresholds() {
        assert_eq!(bucket_of(0, 9), Bucket::Front);
        assert_eq!(bucket_of(2, 9), Bucket::Front);
        assert_eq!(bucket_of(3, 9), Bucket::Middle);
        assert_eq!(bucket_of(4, 9), Bucket::Middle);
        assert_eq!(bucket_of(5, 9), Bucket::Middle);
        assert_eq!(bucket_of(6, 9), Bucket::End);
        assert_eq!(bucket_of(8, 9), Bucket::End);
    }

    #[test]
    fn inert_verdicts() {
        let th = InertThresholds { rho_max: 0.2, em_eps: 2.5 };
        assert!(active_inert(0.5, 0.01, 0.2, th));
        assert!(!active_inert(0.0, 0.01, 0.2, th));
        assert!(!active_inert(0.5, 0.01, 5.0, th));
        assert!(!active_inert(0.5, f64::NAN, 0.2, th));
    }
}
