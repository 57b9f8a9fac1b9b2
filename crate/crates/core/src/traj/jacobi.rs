//! Strided second differences of Jacobi residuals, shared by the JFR family,
//! its Fisher twins and the attribution diagnostic.

use tensor::{Tensor, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::Result;
use crate::nn::Graph;
use crate::traj::bank::RowTarget;

/// What is subtracted from `h` before differencing.
#[derive(Debug, Clone, Copy)]
pub enum Centroid<'a> {
    /// Masked mean over surviving rows at each relative span position.
    Batch,
    /// Nothing: the stencil acts on raw states.
    Raw,
    /// Per-row stop-gradient targets; rows without one use the batch centroid.
    Local(&'a [Option<RowTarget>]),
}

/// One stencil centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StencilTerm {
    pub row: usize,
    /// Position relative to the clipped span start.
    pub t: usize,
    /// Clipped span length of the row.
    pub len: usize,
    pub delta: usize,
    /// Absolute sequence position of the centre.
    pub centre: usize,
}

#[derive(Debug, Clone)]
pub struct ScaleStencil {
    pub delta: usize,
    /// `[N, D]` rows of `D^2_delta J / delta^2`.
    pub rows: Var,
    pub terms: Vec<StencilTerm>,
}

#[derive(Debug, Clone, Default)]
pub struct StencilSet {
    /// Scales with at least one valid centre, in request order.
    pub scales: Vec<ScaleStencil>,
    /// Rows that fell back to the batch centroid under [`Centroid::Local`].
    pub fallback_rows: Vec<usize>,
}

/// Build the residual stencils of `hf` (`[B*S, D]`, bound on `g`).
pub fn build(
    g: &mut Graph,
    hf: Var,
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    centroid: Centroid<'_>,
    scales: &[usize],
) -> Result<StencilSet> {
    let (s, d) = (batch.seq_len(), batch.dim());
    let rows = batch.batch_size() * s;
    let active: Vec<(usize, usize, usize)> = clip.active().map(|(b, r)| (b, r.lo, r.len())).collect();

    // key of (row, t) inside the residual matrix, plus per-position validity
    let mut key = vec![Vec::new(); batch.batch_size()];
    let mut valid = vec![Vec::new(); batch.batch_size()];
    let mut k = 0;
    for &(b, _, len) in &active {
        key[b] = (k..k + len).collect();
        k += len;
        let limit = match centroid {
            Centroid::Local(targets) => targets
                .get(b)
                .and_then(|t| t.as_ref())
                .map_or(len, |t| t.centroid.shape()[0].min(len)),
            _ => len,
        };
        valid[b] = (0..len).map(|t| t < limit).collect();
    }
    let total = k;

    let mut out = StencilSet::default();
    if total == 0 {
        return Ok(out);
    }

    let mut cmat = Tensor::zeros(&[total, rows]);
    let mut offsets: Option<Tensor> = None;
    let mut use_batch = vec![false; batch.batch_size()];
    for &(b, _, _) in &active {
        use_batch[b] = match centroid {
            Centroid::Batch => true,
            Centroid::Raw => false,
            Centroid::Local(targets) => {
                let missing = targets.get(b).is_none_or(|t| t.is_none());
                if missing {
                    out.fallback_rows.push(b);
                }
                missing
            }
        };
    }
    let max_len = active.iter().map(|a| a.2).max().unwrap_or(0);
    let counts: Vec<usize> = (0..max_len)
        .map(|t| active.iter().filter(|a| a.2 > t).count())
        .collect();
    {
        let c = cmat.data_mut();
        for &(b, lo, len) in &active {
            for t in 0..len {
                let kk = key[b][t];
                c[kk * rows + b * s + lo + t] += 1.0;
                if use_batch[b] {
                    let inv = 1.0 / counts[t] as f64;
                    for &(b2, lo2, len2) in &active {
                        if len2 > t {
                            c[kk * rows + b2 * s + lo2 + t] -= inv;
                        }
                    }
                }
            }
        }
    }
    if let Centroid::Local(targets) = centroid {
        let mut off = Tensor::zeros(&[total, d]);
        for &(b, _, len) in &active {
            if let Some(Some(target)) = targets.get(b) {
                let lc = target.centroid.shape()[0].min(len);
                for t in 0..lc {
                    let kk = key[b][t];
                    off.data_mut()[kk * d..(kk + 1) * d].copy_from_slice(target.centroid.row(t));
                }
            }
        }
        offsets = Some(off);
    }
    let cm = g.constant(cmat);
    let mut j = g.tape.matmul(cm, hf)?;
    if let Some(off) = offsets {
        let off = g.constant(off);
        let off = g.tape.stop_grad(off);
        j = g.tape.sub(j, off)?;
    }

    for &delta in scales {
        if delta == 0 {
            continue;
        }
        let mut terms = Vec::new();
        for &(b, lo, len) in &active {
            if len < 2 * delta + 1 {
                continue;
            }
            for t in delta..len - delta {
                if valid[b][t - delta] && valid[b][t] && valid[b][t + delta] {
                    terms.push(StencilTerm {
                        row: b,
                        t,
                        len,
                        delta,
                        centre: lo + t,
                    });
                }
            }
        }
        if terms.is_empty() {
            continue;
        }
        let inv = 1.0 / (delta * delta) as f64;
        let mut smat = Tensor::zeros(&[terms.len(), total]);
        {
            let sd = smat.data_mut();
            for (n, term) in terms.iter().enumerate() {
                let keys = &key[term.row];
                sd[n * total + keys[term.t + delta]] += inv;
                sd[n * total + keys[term.t]] -= 2.0 * inv;
                sd[n * total + keys[term.t - delta]] += inv;
            }
        }
        let sm = g.constant(smat);
        let rows = g.tape.matmul(sm, j)?;
        out.scales.push(ScaleStencil { delta, rows, terms });
    }
    Ok(out)
}

/// Mean squared Euclidean norm of one scale's stencil rows.
pub fn euclid_mean(g: &mut Graph, st: &ScaleStencil) -> Result<Var> {
    let sq = g.tape.square(st.rows);
    let total = g.tape.sum_all(sq);
    Ok(g.tape.scale(total, 1.0 / st.terms.len() as f64))
}

/// Uniform mean of per-scale terms; `None` when no scale survived.
pub fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = parts.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &p in rest {
        acc = g.tape.add(acc, p)?;
    }
    if parts.len() == 1 {
        return Ok(Some(acc));
    }
    Ok(Some(g.tape.scale(acc, 1.0 / parts.len() as f64)))
}
