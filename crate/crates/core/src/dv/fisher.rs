//! Fisher pull-back metric of a frozen head and the Fisher-weighted JFR family.

use tensor::{DualValue, Tensor, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::{KitError, Result};
use crate::head::{softmax_vec, ToyLMHead};
use crate::nn::{bind_hidden, Graph};
use crate::traj::jacobi::{self, Centroid};
use crate::traj::{RowTarget, FALLBACK};

/// Frozen head plus its next-token distribution at every flat position, both constants.
#[derive(Debug, Clone)]
pub struct FisherContext {
    pub head: ToyLMHead,
    /// `[B*S, V]`.
    pub p: Tensor,
}

impl FisherContext {
    pub fn new(head: ToyLMHead, batch: &TrajectoryBatch) -> Result<Self> {
        if head.dim() != batch.dim() {
            return Err(KitError::Config(format!(
                "head dim {} does not match batch dim {}",
                head.dim(),
                batch.dim()
            )));
        }
        let n = batch.batch_size() * batch.seq_len();
        let d = batch.dim();
        let h = batch.hidden().data();
        let mut p = Vec::with_capacity(n * head.vocab());
        for i in 0..n {
            p.extend(head.probs_of(&h[i * d..(i + 1) * d]));
        }
        let p = Tensor::new(vec![n, head.vocab()], p)?;
        Ok(Self { head, p })
    }

    /// Distribution at flat position `i`.
    pub fn probs(&self, i: usize) -> &[f64] {
        self.p.row(i)
    }

    /// `v^T G v` at flat position `i`.
    pub fn norm_sq_at(&self, i: usize, v: &[f64]) -> f64 {
        fisher_norm_sq(&self.head, self.probs(i), v)
    }
}

/// `Var_{y~p}[(W v)_y] / T^2`, which equals `v^T W^T (diag p - p p^T) W v / T^2`.
pub fn fisher_norm_sq(head: &ToyLMHead, p: &[f64], v: &[f64]) -> f64 {
    let u = head.logits_of(v);
    let mean: f64 = p.iter().zip(&u).map(|(a, b)| a * b).sum();
    let var: f64 = p.iter().zip(&u).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
    var / (head.temperature * head.temperature)
}

/// Dense `W^T (diag p - p p^T) W / T^2`.
pub fn dense_fisher(head: &ToyLMHead, p: &[f64]) -> Result<Tensor> {
    let (vocab, d) = (head.vocab(), head.dim());
    let mut m = Tensor::zeros(&[vocab, vocab]);
    for i in 0..vocab {
        for j in 0..vocab {
            m.data_mut()[i * vocab + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
        }
    }
    let w = head.weight();
    let g = w.transpose()?.matmul(&m)?.matmul(w)?;
    let t2 = head.temperature * head.temperature;
    Ok(Tensor::new(vec![d, d], g.data().iter().map(|x| x / t2).collect())?)
}

/// Per-row Fisher norms of `rows: [N, D]` under constant distributions `p: [N, V]`; result `[N]`.
pub fn fisher_rows(g: &mut Graph, head: &ToyLMHead, rows: Var, p: Tensor) -> Result<Var> {
    let n = g.tape.shape(rows)[0];
    let u = head.logits_on(&mut g.tape, rows)?;
    let pc = g.constant(p);
    let pu = g.tape.mul(pc, u)?;
    let mean = g.tape.sum_axis(pu, 1)?;
    let mean = g.tape.reshape(mean, &[n, 1])?;
    let c = g.tape.sub(u, mean)?;
    let c2 = g.tape.square(c);
    let pc2 = g.tape.mul(pc, c2)?;
    let var = g.tape.sum_axis(pc2, 1)?;
    Ok(g.tape.scale(var, 1.0 / (head.temperature * head.temperature)))
}

/// Stencil geometry shared with the Euclidean twins.
#[derive(Debug, Clone, Copy)]
pub enum FisherVariant<'a> {
    Jfr,
    Mstb(&'a [usize]),
    Local(&'a [Option<RowTarget>]),
}

/// Euclidean JFR family with the squared norm of each stencil row replaced by the
/// Fisher norm at its centre. `weights`, when given, multiply each centre's term
/// (indexed by flat position); the per-scale mean still divides by the term count.
pub fn fisher_jfr_family(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    ctx: &FisherContext,
    variant: FisherVariant<'_>,
    weights: Option<&[f64]>,
) -> Result<DualValue> {
    let n = batch.batch_size() * batch.seq_len();
    if ctx.p.shape()[0] != n {
        return Err(KitError::Config("Fisher context was built for a different batch shape".into()));
    }
    if weights.is_some_and(|w| w.len() != n) {
        return Err(KitError::Config(format!("margin weights must have {n} entries")));
    }
    let (centroid, scales): (Centroid<'_>, &[usize]) = match variant {
        FisherVariant::Jfr => (Centroid::Batch, &[1]),
        FisherVariant::Mstb(s) => (Centroid::Batch, s),
        FisherVariant::Local(t) => (Centroid::Local(t), &[1]),
    };
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let set = jacobi::build(&mut g, hf, batch, clip, centroid, scales)?;
    let vocab = ctx.head.vocab();
    let mut parts = Vec::new();
    for st in &set.scales {
        let centres: Vec<usize> = st.terms.iter().map(|t| batch.flat(t.row, t.centre)).collect();
        let mut p = Vec::with_capacity(centres.len() * vocab);
        for &c in &centres {
            p.extend_from_slice(ctx.probs(c));
        }
        let p = Tensor::new(vec![centres.len(), vocab], p)?;
        let mut per = fisher_rows(&mut g, &ctx.head, st.rows, p)?;
        if let Some(w) = weights {
            let wc = g.constant(Tensor::vector(centres.iter().map(|&c| w[c]).collect()));
            per = g.tape.mul(per, wc)?;
        }
        parts.push(g.tape.mean_all(per));
    }
    let out = match jacobi::mean_of(&mut g, &parts)? {
        Some(root) => g.finish(root)?,
        None => g.empty(),
    };
    Ok(if set.fallback_rows.is_empty() { out } else { out.with_flag(FALLBACK) })
}

/// One point of the Fisher/KL calibration sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlPoint {
    pub scale: f64,
    /// `2 KL(p_h || p_{h + s v})`.
    pub kl2: f64,
    /// `(s v)^T G(h) (s v)`.
    pub fisher: f64,
    /// `kl2 / fisher`; NaN when the Fisher side vanishes.
    pub ratio: f64,
}

impl KlPoint {
    pub fn degenerate(&self) -> bool {
        self.ratio.is_nan()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

/// `2 KL(p_h || p_{h+sv}) / ||s v||^2_G` for each scale.
pub fn fisher_kl_check(head: &ToyLMHead, h: &[f64], v: &[f64], scales: &[f64]) -> Result<Vec<KlPoint>> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(KitError::Config("direction must be non-zero".into()));
    }
    if h.len() != head.dim() || v.len() != head.dim() {
        return Err(KitError::Config(format!("state and direction must have dim {}", head.dim())));
    }
    let p = head.probs_of(h);
    Ok(scales
        .iter()
        .map(|&s| {
            let moved: Vec<f64> = h.iter().zip(v).map(|(a, b)| a + s * b).collect();
            let q = softmax_vec(&head.logits_of(&moved), head.temperature);
            let sv: Vec<f64> = v.iter().map(|x| s * x).collect();
            let kl2 = 2.0 * kl(&p, &q);
            let fisher = fisher_norm_sq(head, &p, &sv);
            let ratio = if fisher > 0.0 { kl2 / fisher } else { f64::NAN };
            KlPoint { scale: s, kl2, fisher, ratio }
        })
        .collect())
}
