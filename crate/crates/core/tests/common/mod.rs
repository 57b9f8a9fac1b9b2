#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor::{finite_diff_at, max_rel_error, DualValue, Step, Tensor};
use tubekit::{Span, TrajectoryBatch};

pub const GRAD_RTOL: f64 = 1e-5;

/// Batch whose state at `(b, t)` is `f(b, t)`.
pub fn batch_from(
    b: usize,
    s: usize,
    d: usize,
    spans: &[(usize, usize)],
    f: impl Fn(usize, usize) -> Vec<f64>,
) -> TrajectoryBatch {
    let mut data = Vec::with_capacity(b * s * d);
    for bi in 0..b {
        for t in 0..s {
            let v = f(bi, t);
            assert_eq!(v.len(), d);
            data.extend(v);
        }
    }
    let spans = spans.iter().map(|&(lo, hi)| Span::new(lo, hi)).collect();
    TrajectoryBatch::new(Tensor::new(vec![b, s, d], data).unwrap(), spans).unwrap()
}

pub fn random_batch(b: usize, s: usize, d: usize, seed: u64) -> TrajectoryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans: Vec<(usize, usize)> = (0..b)
        .map(|_| {
            let len = rng.random_range(s / 2..s - 2);
            let lo = rng.random_range(1..s - len);
            (lo, lo + len)
        })
        .collect();
    let hidden: Vec<f64> = (0..b * s * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spans = spans.iter().map(|&(lo, hi)| Span::new(lo, hi)).collect();
    TrajectoryBatch::new(Tensor::new(vec![b, s, d], hidden).unwrap(), spans).unwrap()
}

pub fn with_hidden(batch: &TrajectoryBatch, h: &Tensor) -> TrajectoryBatch {
    let mut out = batch.clone();
    out.set_hidden(h.clone()).unwrap();
    out
}

/// Up to `n` flat coordinates of `x`, favouring positions inside spans when a batch is given.
pub fn coords(x: &Tensor, batch: Option<&TrajectoryBatch>, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let pool: Vec<usize> = match batch {
        Some(b) => {
            let d = b.dim();
            let mut p = Vec::new();
            for (row, sp) in b.spans().iter().enumerate() {
                for t in sp.lo.saturating_sub(1)..sp.hi {
                    for j in 0..d {
                        p.push(b.flat(row, t) * d + j);
                    }
                }
            }
            p
        }
        None => (0..x.numel()).collect(),
    };
    if pool.len() <= n {
        return pool;
    }
    rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Compare the analytic gradient for leaf `name` against central differences.
pub fn check_leaf(
    name: &str,
    x0: &Tensor,
    coords: &[usize],
    mut eval: impl FnMut(&Tensor) -> DualValue,
) -> f64 {
    let dual = eval(x0);
    let g = dual
        .grad(name)
        .unwrap_or_else(|| panic!("no gradient for leaf `{name}`"));
    assert_eq!(g.shape(), x0.shape(), "gradient shape for `{name}`");
    let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
    let numeric = finite_diff_at(|x| Ok(eval(x).value), x0, coords, Step::default()).unwrap();
    let err = max_rel_error(&analytic, &numeric, 1e-6);
    assert!(
        err <= GRAD_RTOL,
        "leaf `{name}`: relative error {err:e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
    );
    err
}

/// Gradient check on the hidden leaf.
pub fn check_hidden(
    batch: &TrajectoryBatch,
    seed: u64,
    mut f: impl FnMut(&TrajectoryBatch) -> DualValue,
) -> f64 {
    let c = coords(batch.hidden(), Some(batch), 96, seed);
    check_leaf(tubekit::HIDDEN, batch.hidden(), &c, |h| f(&with_hidden(batch, h)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}
