//! Sampled direction and curvature penalties: STP, C-tube and the metric cosine.

use rand::Rng;
use tensor::{DualValue, Tensor, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::{KitError, Result};
use crate::nn::{bind_hidden, sample_sorted, Graph, Init, Linear, Module, Param};

/// Log-diagonal bias at initialisation. `exp` of it underflows to exactly 0,
/// so the metric starts as the identity to the last bit.
pub const METRIC_D_INIT: f64 = -800.0;

/// Flat row indices for `k` sorted draws inside each row with at least `k` positions.
fn draw<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    k: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    clip.active()
        .filter(|(_, r)| r.len() >= k)
        .map(|(b, r)| {
            sample_sorted(rng, r.len(), k)
                .into_iter()
                .map(|i| batch.flat(b, r.lo + i))
                .collect()
        })
        .collect()
}

fn column(draws: &[Vec<usize>], i: usize) -> Vec<usize> {
    draws.iter().map(|d| d[i]).collect()
}

fn sq_norm(h: &Tensor, a: usize, b: usize) -> f64 {
    h.row(a).iter().zip(h.row(b)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 - mean(c)` over a `[R]` vector of cosines.
fn one_minus_mean(g: &mut Graph, cos: Var) -> Var {
    let m = g.tape.mean_all(cos);
    let m = g.tape.neg(m);
    g.tape.add_scalar(m, 1.0)
}

/// Mean over rows of `1 - cos(u, v)` with `u = h_{i2} - h_{i1}`, `v = h_{i4} - h_{i3}`.
pub fn stp_loss<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    rng: &mut R,
) -> Result<DualValue> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let flat = g.tape.value(hf).clone();
    let draws: Vec<Vec<usize>> = draw(batch, clip, 4, rng)
        .into_iter()
        .filter(|d| sq_norm(&flat, d[0], d[1]) > 1e-24 && sq_norm(&flat, d[2], d[3]) > 1e-24)
        .collect();
    if draws.is_empty() {
        return Ok(g.empty());
    }
    let sel: Vec<Var> = (0..4)
        .map(|i| g.tape.index_select(hf, 0, &column(&draws, i)))
        .collect::<std::result::Result<_, _>>()?;
    let u = g.tape.sub(sel[1], sel[0])?;
    let v = g.tape.sub(sel[3], sel[2])?;
    let cos = g.tape.cosine(u, v, 1)?;
    let root = one_minus_mean(&mut g, cos);
    g.finish(root)
}

/// Mean squared norm of the chord-orthogonal part of the averaged second difference.
pub fn ctube_loss<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    rng: &mut R,
) -> Result<DualValue> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let flat = g.tape.value(hf).clone();
    let draws: Vec<Vec<usize>> = draw(batch, clip, 4, rng)
        .into_iter()
        .filter(|d| sq_norm(&flat, d[0], d[3]) > 1e-24)
        .collect();
    if draws.is_empty() {
        return Ok(g.empty());
    }
    let sel: Vec<Var> = (0..4)
        .map(|i| g.tape.index_select(hf, 0, &column(&draws, i)))
        .collect::<std::result::Result<_, _>>()?;
    let (s, p, q, t) = (sel[0], sel[1], sel[2], sel[3]);
    // d2 = 0.5 [(q - p) - (p - s)] + 0.5 [(t - q) - (q - p)]
    let qp = g.tape.sub(q, p)?;
    let ps = g.tape.sub(p, s)?;
    let tq = g.tape.sub(t, q)?;
    let first = g.tape.sub(qp, ps)?;
    let second = g.tape.sub(tq, qp)?;
    let sum = g.tape.add(first, second)?;
    let d2 = g.tape.scale(sum, 0.5);
    let chord = g.tape.sub(t, s)?;
    let num = g.tape.inner(d2, chord, 1)?;
    let den = g.tape.inner(chord, chord, 1)?;
    let coef = g.tape.div(num, den)?;
    let coef = g.tape.reshape(coef, &[draws.len(), 1])?;
    let along = g.tape.mul(coef, chord)?;
    let kappa = g.tape.sub(d2, along)?;
    let k2 = g.tape.inner(kappa, kappa, 1)?;
    let root = g.tape.mean_all(k2);
    g.finish(root)
}

/// `g(h) = I + U(h) U(h)^T + diag(exp d(h))` from a one-hidden-layer GELU network.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricHead {
    pub hidden: Linear,
    pub u: Linear,
    pub d: Linear,
    pub rank: usize,
}

impl MetricHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, width: usize, rank: usize, rng: &mut R) -> Self {
        Self::with_d_init(dim, width, rank, METRIC_D_INIT, rng)
    }

    pub fn with_d_init<R: Rng + ?Sized>(
        dim: usize,
        width: usize,
        rank: usize,
        d_init: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::new("rig.hidden", dim, width, Init::Xavier, true, rng);
        let u = Linear::new("rig.u", width, dim * rank, Init::Zeros, true, rng);
        let mut d = Linear::new("rig.d", width, dim, Init::Zeros, true, rng);
        if let Some(b) = &mut d.bias {
            b.value = Tensor::full(&[dim], d_init);
        }
        Self { hidden, u, d, rank }
    }

    pub fn dim(&self) -> usize {
        self.d.output_dim()
    }

    /// Dense `D x D` metric at one state (for oracles and inspection).
    pub fn metric_at(&self, h: &[f64]) -> Result<Tensor> {
        let dim = self.dim();
        let x = Tensor::new(vec![1, dim], h.to_vec())?;
        let a = self.hidden.eval(&x)?.map(tensor::gelu);
        let u = self.u.eval(&a)?;
        let d = self.d.eval(&a)?;
        let mut gm = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            for j in 0..dim {
                let mut v: f64 = (0..self.rank)
                    .map(|k| u.data()[i * self.rank + k] * u.data()[j * self.rank + k])
                    .sum();
                if i == j {
                    v += 1.0 + d.data()[i].exp();
                }
                gm.data_mut()[i * dim + j] = v;
            }
        }
        Ok(gm)
    }
}

impl Module for MetricHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.hidden.params();
        v.extend(self.u.params());
        v.extend(self.d.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.hidden.params_mut();
        v.extend(self.u.params_mut());
        v.extend(self.d.params_mut());
        v
    }
}

fn triples<R: Rng + ?Sized>(
    g: &mut Graph,
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    rng: &mut R,
) -> Result<Option<(Var, Var, Vec<usize>)>> {
    let hf = bind_hidden(g, batch)?;
    let flat = g.tape.value(hf).clone();
    let draws: Vec<Vec<usize>> = draw(batch, clip, 3, rng)
        .into_iter()
        .filter(|d| sq_norm(&flat, d[1], d[2]) > 1e-24 && sq_norm(&flat, d[0], d[1]) > 1e-24)
        .collect();
    if draws.is_empty() {
        return Ok(None);
    }
    let s = g.tape.index_select(hf, 0, &column(&draws, 0))?;
    let r = g.tape.index_select(hf, 0, &column(&draws, 1))?;
    let t = g.tape.index_select(hf, 0, &column(&draws, 2))?;
    let a = g.tape.sub(t, r)?;
    let b = g.tape.sub(r, s)?;
    Ok(Some((a, b, column(&draws, 1))))
}

/// Euclidean cosine form on triples `s < r < t`: `1 - cos(h_t - h_r, h_r - h_s)`.
pub fn rig_plain_loss<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    rng: &mut R,
) -> Result<DualValue> {
    let mut g = Graph::new();
    let Some((a, b, _)) = triples(&mut g, batch, clip, rng)? else {
        return Ok(g.empty());
    };
    let cos = g.tape.cosine(a, b, 1)?;
    let root = one_minus_mean(&mut g, cos);
    g.finish(root)
}

/// `1 - <a,b>_g / (|a|_g |b|_g)` with `g` evaluated at the middle state.
pub fn rig_loss<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    head: &MetricHead,
    rng: &mut R,
) -> Result<DualValue> {
    let mut g = Graph::new();
    g.bind_all(head);
    let Some((a, b, centres)) = triples(&mut g, batch, clip, rng)? else {
        return Ok(g.empty());
    };
    let n = centres.len();
    let d = batch.dim();
    let hf = bind_hidden(&mut g, batch)?;
    let hr = g.tape.index_select(hf, 0, &centres)?;
    let act = head.hidden.forward(&mut g, hr)?;
    let act = g.tape.gelu(act);
    let u = head.u.forward(&mut g, act)?;
    let u = g.tape.reshape(u, &[n, d, head.rank])?;
    let logd = head.d.forward(&mut g, act)?;
    let diag = g.tape.exp(logd);

    let form = |g: &mut Graph, x: Var, y: Var| -> Result<Var> {
        let base = g.tape.inner(x, y, 1)?;
        let x3 = g.tape.reshape(x, &[n, d, 1])?;
        let y3 = g.tape.reshape(y, &[n, d, 1])?;
        let ux = g.tape.mul(u, x3)?;
        let ux = g.tape.sum_axis(ux, 1)?;
        let uy = g.tape.mul(u, y3)?;
        let uy = g.tape.sum_axis(uy, 1)?;
        let low = g.tape.inner(ux, uy, 1)?;
        let xy = g.tape.mul(x, y)?;
        let dxy = g.tape.mul(diag, xy)?;
        let dg = g.tape.sum_axis(dxy, 1)?;
        let s = g.tape.add(base, low)?;
        Ok(g.tape.add(s, dg)?)
    };
    let ab = form(&mut g, a, b)?;
    let aa = form(&mut g, a, a)?;
    let bb = form(&mut g, b, b)?;
    let na = g.tape.sqrt(aa);
    let nb = g.tape.sqrt(bb);
    let den = g.tape.mul(na, nb)?;
    let cos = g.tape.div(ab, den)?;
    let root = one_minus_mean(&mut g, cos);
    g.finish(root)
}

/// Cosine under a fixed dense metric, for oracle comparisons.
pub fn metric_cosine(gm: &Tensor, a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len();
    if gm.shape() != [n, n] || b.len() != n {
        return Err(KitError::Config("metric and vectors disagree in size".into()));
    }
    let form = |x: &[f64], y: &[f64]| -> f64 {
        (0..n)
            .map(|i| (0..n).map(|j| x[i] * gm.data()[i * n + j] * y[j]).sum::<f64>())
            .sum()
    };
    Ok(form(a, b) / (form(a, a).sqrt() * form(b, b).sqrt()))
}
