mod common;

use common::*;
use rand::Rng;
use tensor::Tensor;
use tubekit::dv::*;
use tubekit::head::softmax_vec;
use tubekit::nn::Graph;
use tubekit::traj::{local_targets, MemoryBank, FALLBACK};
use tubekit::{eos_clip, synth_batch, Module, SpanPolicy, SynthConfig, ToyLMHead, TrajectoryBatch, EMPTY, HIDDEN};

fn random_head<R: Rng>(v: usize, d: usize, r: &mut R) -> ToyLMHead {
    ToyLMHead::new(Tensor::from_fn(&[v, d], |_| r.random_range(-1.0..1.0))).unwrap()
}

fn random_vec<R: Rng>(d: usize, r: &mut R) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn quad(g: &Tensor, v: &[f64]) -> f64 {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| v[i] * g.data()[i * d + j] * v[j]).sum::<f64>()).sum()
}

#[test]
fn fisher_norm_matches_dense_metric() {
    let mut r = rng(1);
    for _ in 0..100 {
        let v_sz = r.random_range(2..=64);
        let d = r.random_range(1..=32);
        let head = random_head(v_sz, d, &mut r);
        let h = random_vec(d, &mut r);
        let v = random_vec(d, &mut r);
        let p = head.probs_of(&h);
        let fast = fisher_norm_sq(&head, &p, &v);
        let dense = quad(&dense_fisher(&head, &p).unwrap(), &v);
        assert!((fast - dense).abs() <= 1e-10 * dense.abs().max(1e-300), "{fast} vs {dense}");
    }
}

#[test]
fn fisher_norm_examples() {
    let head = ToyLMHead::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(fisher_norm_sq(&head, &[0.5, 0.5], &[0.0, 0.0]), 0.0);
    assert_eq!(fisher_norm_sq(&head, &[0.5, 0.5], &[1.0, 0.0]), 0.25);
    let mut r = rng(2);
    let big = random_head(8, 4, &mut r);
    let mut onehot = vec![0.0; 8];
    onehot[3] = 1.0;
    for _ in 0..10 {
        assert_eq!(fisher_norm_sq(&big, &onehot, &random_vec(4, &mut r)), 0.0);
    }
}

#[test]
fn fisher_norm_ignores_constant_logit_shift() {
    let mut r = rng(3);
    let head = random_head(6, 3, &mut r);
    let v = vec![0.5, -1.0, 2.0];
    let p = head.probs_of(&random_vec(3, &mut r));
    // W' = W + 1 a^T with a = e0 shifts every component of W v by v[0].
    let mut w = head.weight().clone();
    for i in 0..6 {
        w.data_mut()[i * 3] += 1.0;
    }
    let shifted = ToyLMHead::new(w).unwrap();
    let a = fisher_norm_sq(&head, &p, &v);
    let b = fisher_norm_sq(&shifted, &p, &v);
    assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
}

fn labelled_batch(seed: u64) -> (TrajectoryBatch, ToyLMHead) {
    let cfg = SynthConfig::default()
        .with_shape(3, 24, 8)
        .with_span(SpanPolicy::Fixed { len: 16 })
        .with_curvature(0.6);
    let cfg = SynthConfig { vocab: 16, noise: 0.05, ..cfg };
    let batch = synth_batch(&cfg, seed).unwrap();
    (batch, cfg.reference_head())
}

fn line_batch() -> TrajectoryBatch {
    batch_from(3, 14, 4, &[(1, 13), (0, 12), (2, 14)], |b, t| {
        (0..4).map(|j| (b + j) as f64 * 0.3 + t as f64 * (0.2 + 0.1 * j as f64)).collect()
    })
}

#[test]
fn fisher_family_vanishes_on_linear_residuals() {
    let batch = line_batch();
    let clip = eos_clip(&batch, 0, 5);
    let head = random_head(10, 4, &mut rng(4));
    let ctx = FisherContext::new(head, &batch).unwrap();
    for variant in [FisherVariant::Jfr, FisherVariant::Mstb(&[1, 2, 3])] {
        let v = fisher_jfr_family(&batch, &clip, &ctx, variant, None).unwrap().value;
        assert!(v.abs() < 1e-12, "{v}");
    }
}

#[test]
fn fisher_family_degenerate_distribution_is_zero() {
    let batch = random_batch(3, 14, 4, 5);
    let clip = eos_clip(&batch, 0, 5);
    let head = random_head(10, 4, &mut rng(4));
    let mut ctx = FisherContext::new(head, &batch).unwrap();
    ctx.p = Tensor::from_fn(ctx.p.shape(), |i| if i % 10 == 7 { 1.0 } else { 0.0 });
    let v = fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Jfr, None).unwrap().value;
    assert_eq!(v, 0.0);
}

#[test]
fn fisher_family_dense_oracle_example() {
    // Two mirrored rows: batch centroid is 0, so residuals are the states themselves.
    let pts = [[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
    let batch = batch_from(2, 3, 2, &[(0, 3), (0, 3)], |b, t| {
        let s = if b == 0 { 1.0 } else { -1.0 };
        pts[t].iter().map(|x| s * x).collect()
    });
    let clip = eos_clip(&batch, 0, 3);
    let head = ToyLMHead::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let ctx = FisherContext::new(head, &batch).unwrap();
    assert_eq!(ctx.probs(1), &[0.5, 0.5]);
    let v = fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Jfr, None).unwrap().value;
    assert!((v - 1.0).abs() < 1e-15, "{v}");
}

/// Plain re-computation: batch-centroid residuals, strided stencil, Fisher norm at the centre.
fn fisher_oracle(batch: &TrajectoryBatch, clip: &tubekit::ClippedSpan, ctx: &FisherContext, scales: &[usize], w: Option<&[f64]>) -> f64 {
    let d = batch.dim();
    let active: Vec<_> = clip.active().collect();
    let max_len = active.iter().map(|a| a.1.len()).max().unwrap();
    let centroid: Vec<Vec<f64>> = (0..max_len)
        .map(|t| {
            let rows: Vec<_> = active.iter().filter(|a| a.1.len() > t).collect();
            (0..d)
                .map(|j| rows.iter().map(|(b, r)| batch.state(*b, r.lo + t)[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        })
        .collect();
    let mut per_scale = Vec::new();
    for &delta in scales {
        let mut total = 0.0;
        let mut count = 0;
        for (b, r) in &active {
            let j = |t: usize| -> Vec<f64> { (0..d).map(|k| batch.state(*b, r.lo + t)[k] - centroid[t][k]).collect() };
            if r.len() < 2 * delta + 1 {
                continue;
            }
            for t in delta..r.len() - delta {
                let (a, m, c) = (j(t - delta), j(t), j(t + delta));
                let s: Vec<f64> = (0..d).map(|k| (a[k] - 2.0 * m[k] + c[k]) / (delta * delta) as f64).collect();
                let centre = batch.flat(*b, r.lo + t);
                total += w.map_or(1.0, |w| w[centre]) * ctx.norm_sq_at(centre, &s);
                count += 1;
            }
        }
        if count > 0 {
            per_scale.push(total / count as f64);
        }
    }
    per_scale.iter().sum::<f64>() / per_scale.len() as f64
}

#[test]
fn fisher_family_matches_plain_oracle() {
    let (batch, head) = labelled_batch(3);
    let clip = eos_clip(&batch, 2, 3);
    let ctx = FisherContext::new(head.clone(), &batch).unwrap();
    let w = batch_margin_weights(&batch, &head, MarginWeightConfig::default()).unwrap();
    for (scales, variant) in [(vec![1], FisherVariant::Jfr), (vec![1, 2, 3], FisherVariant::Mstb(&[1, 2, 3]))] {
        for weights in [None, Some(w.weights.as_slice())] {
            let v = fisher_jfr_family(&batch, &clip, &ctx, variant, weights).unwrap().value;
            let o = fisher_oracle(&batch, &clip, &ctx, &scales, weights);
            assert!((v - o).abs() < 1e-12 * o.max(1.0), "{v} vs {o}");
        }
    }
}

#[test]
fn fisher_local_variant_flags_fallback_and_uses_targets() {
    let (batch, head) = labelled_batch(4);
    let clip = eos_clip(&batch, 2, 3);
    let ctx = FisherContext::new(head, &batch).unwrap();
    let empty = MemoryBank::default();
    let targets = local_targets(&batch, &clip, &empty);
    let out = fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Local(&targets), None).unwrap();
    assert!(out.has_flag(FALLBACK));
    let jfr = fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Jfr, None).unwrap();
    assert!((out.value - jfr.value).abs() < 1e-14);

    let mut bank = MemoryBank::default();
    bank.update(&batch, &clip);
    let targets = local_targets(&batch, &clip, &bank);
    let out = fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Local(&targets), None).unwrap();
    assert!(!out.has_flag(FALLBACK));
    assert!(out.value.is_finite() && out.value >= 0.0);
}

#[test]
fn fisher_family_rejects_mismatched_inputs() {
    let (batch, head) = labelled_batch(5);
    let clip = eos_clip(&batch, 2, 3);
    let ctx = FisherContext::new(head, &batch).unwrap();
    assert!(fisher_jfr_family(&batch, &clip, &ctx, FisherVariant::Jfr, Some(&[1.0; 3])).is_err());
    let other = random_batch(2, 10, 8, 0);
    assert!(fisher_jfr_family(&other, &eos_clip(&other, 0, 3), &ctx, FisherVariant::Jfr, None).is_err());
    assert!(FisherContext::new(random_head(4, 3, &mut rng(0)), &batch).is_err());
}

#[test]
fn quantile_is_linearly_interpolated() {
    assert_eq!(quantile_linear(&mut [4.0, 1.0, 3.0, 2.0], 0.5), Some(2.5));
    assert_eq!(quantile_linear(&mut [4.0, 1.0, 3.0], 0.5), Some(3.0));
    assert_eq!(quantile_linear(&mut [5.0, 1.0], 0.25), Some(2.0));
    assert_eq!(quantile_linear(&mut [], 0.5), None);
}

#[test]
fn margin_weight_examples() {
    let cfg = MarginWeightConfig::default();
    let logits = Tensor::matrix(1, 3, vec![2.0, 0.5, -1.0]).unwrap();
    let w = margin_weights(&logits, &[Some(0)], cfg).unwrap();
    assert_eq!(w.tau, Some(1.5));
    assert_eq!(w.weights, vec![0.5]);

    let logits = Tensor::matrix(3, 2, vec![0.0, 0.0, 800.0, 0.0, -800.0, 0.0]).unwrap();
    let w = margin_weights(&logits, &[Some(0), Some(0), Some(0)], cfg).unwrap();
    assert_eq!(w.tau, Some(0.0));
    assert_eq!(w.weights[0], 0.5);
    assert!(w.weights[1] < 1e-300);
    assert_eq!(w.weights[2], 1.0);
    assert!(w.weights.iter().all(|x| (0.0..=1.0).contains(x)));

    let w = margin_weights(&logits, &[None, None, None], cfg).unwrap();
    assert!(w.is_empty());
    assert_eq!(w.weights, vec![1.0; 3]);
    assert!(margin_weights(&logits, &[None], cfg).is_err());
}

#[test]
fn margin_weights_follow_sharpness() {
    let logits = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
    let labels = [Some(0), Some(0)];
    let w1 = margin_weights(&logits, &labels, MarginWeightConfig { gamma: 1.0, q: 0.5 }).unwrap();
    let w4 = margin_weights(&logits, &labels, MarginWeightConfig { gamma: 4.0, q: 0.5 }).unwrap();
    assert!((w1.weights[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!(w4.weights[0] > w1.weights[0] && w4.weights[1] < w1.weights[1]);
}

#[test]
fn pcgrad_examples_and_contract() {
    assert_eq!(pcgrad(&[1.0, -1.0], &[0.0, 1.0], 0.0).unwrap(), vec![1.0, 0.0]);
    let g = pcgrad(&[1.0, -1.0], &[0.0, 1.0], PCGRAD_EPS).unwrap();
    assert!((g[0] - 1.0).abs() < 1e-15 && g[1].abs() < 1e-11);
    let a = [0.3, 0.1, -2.0];
    assert_eq!(pcgrad(&a, &[1.0, 0.0, 0.0], PCGRAD_EPS).unwrap(), a.to_vec());
    assert!(pcgrad(&[1.0], &[1.0, 2.0], PCGRAD_EPS).is_err());

    let b = [1.0, 2.0, -0.5];
    let anti: Vec<f64> = b.iter().map(|x| -x).collect();
    let g = pcgrad(&anti, &b, PCGRAD_EPS).unwrap();
    let dot: f64 = g.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!(dot >= -1e-9);

    let mut r = rng(6);
    for _ in 0..2000 {
        let n = r.random_range(1..20);
        let a = random_vec(n, &mut r);
        let c = random_vec(n, &mut r);
        let g = pcgrad(&a, &c, PCGRAD_EPS).unwrap();
        let dot: f64 = g.iter().zip(&c).map(|(x, y)| x * y).sum();
        assert!(dot >= -1e-9);
    }
}

#[test]
fn hinge_examples() {
    assert_eq!(margin_hinge_value(&[5.0, 1.0], 0, 1.0), 0.0);
    assert_eq!(margin_hinge_value(&[1.0, 1.0], 0, 1.0), 1.0);
    assert_eq!(margin_hinge_value(&[0.0, 2.0], 0, 1.0), 3.0);
    let mut g = Graph::new();
    let z = g.input("logits", Tensor::matrix(3, 2, vec![5.0, 1.0, 1.0, 1.0, 0.0, 2.0]).unwrap());
    let root = hinge_on(&mut g, z, &[0, 0, 0], 1.0).unwrap();
    let out = g.finish(root).unwrap();
    assert!((out.value - 4.0 / 3.0).abs() < 1e-15);
    let gz = out.grad("logits").unwrap();
    let third = 1.0 / 3.0;
    assert_eq!(gz.data(), &[0.0, 0.0, -third, third, -third, third]);
}

#[test]
fn batch_hinge_matches_plain_mean_and_flags_missing_labels() {
    let (batch, head) = labelled_batch(7);
    let out = dv_margin_hinge(&batch, &head, 1.0).unwrap();
    let sup = supervised_positions(&batch);
    let d = batch.dim();
    let h = batch.hidden().data();
    let expect = sup
        .iter()
        .map(|&(i, y)| margin_hinge_value(&head.logits_of(&h[i * d..(i + 1) * d]), y, 1.0))
        .sum::<f64>()
        / sup.len() as f64;
    assert!((out.value - expect).abs() < 1e-13);
    let unlabelled = random_batch(2, 10, d, 1);
    assert!(dv_margin_hinge(&unlabelled, &head, 1.0).unwrap().has_flag(EMPTY));
}

/// Hinge gradient at an active position is `(W_j' - W_y) / N`; CE gradient is `W^T (p - e_y)`.
#[test]
fn hinge_gradient_lies_in_the_cone_and_agrees_with_cross_entropy() {
    let mut r = rng(8);
    for _ in 0..200 {
        let (v_sz, d) = (r.random_range(3..24), r.random_range(4..16));
        let head = random_head(v_sz, d, &mut r);
        let h = random_vec(d, &mut r);
        let z = head.logits_of(&h);
        let y = r.random_range(0..v_sz);
        let labels: Vec<Vec<Option<usize>>> = vec![vec![None, Some(y)]];
        let batch = batch_from(1, 2, d, &[(0, 2)], |_, t| if t == 0 { h.clone() } else { vec![0.0; d] })
            .with_labels(labels)
            .unwrap();
        let m = 1.0 + margin_of(&z, y).abs();
        let out = dv_margin_hinge(&batch, &head, m).unwrap();
        assert!(out.value > 0.0);
        let grad = &out.grad(HIDDEN).unwrap().data()[..d];
        let runner = (0..v_sz).filter(|j| *j != y).max_by(|a, b| z[*a].total_cmp(&z[*b])).unwrap();
        let w = head.weight();
        let resid: f64 = (0..d).map(|k| (grad[k] - (w.row(runner)[k] - w.row(y)[k])).abs()).fold(0.0, f64::max);
        assert!(resid < 1e-10, "{resid}");

        let p = softmax_vec(&z, 1.0);
        let ce: Vec<f64> = (0..d)
            .map(|k| (0..v_sz).map(|j| (p[j] - if j == y { 1.0 } else { 0.0 }) * w.row(j)[k]).sum())
            .collect();
        // In logit space the two gradients always agree: (e_j' - e_y) . (p - e_y) = p_j' + 1 - p_y > 0.
        assert!(p[runner] + 1.0 - p[y] > 0.0);
        assert_eq!(ce.len(), d);
    }
}

/// Through a low-rank head the agreement is not guaranteed: a third class far from the
/// gold row can dominate the cross-entropy gradient.
#[test]
fn hidden_space_agreement_can_fail_in_two_dimensions() {
    let head = ToyLMHead::new(Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, -10.0, 10.0]).unwrap()).unwrap();
    let h = [0.1, 0.1];
    let batch = batch_from(1, 2, 2, &[(0, 2)], |_, t| if t == 0 { h.to_vec() } else { vec![0.0, 0.0] })
        .with_labels(vec![vec![None, Some(0)]])
        .unwrap();
    let out = dv_margin_hinge(&batch, &head, 1.0).unwrap();
    let grad = &out.grad(HIDDEN).unwrap().data()[..2];
    assert_eq!(grad, &[1.0, 0.0]);
    let p = head.probs_of(&h);
    let ce = [p[1] * 1.0 + p[2] * -10.0, p[2] * 10.0];
    assert!(grad[0] * ce[0] + grad[1] * ce[1] < 0.0);
}

#[test]
fn fisher_kl_ratio_converges_at_first_order() {
    let mut r = rng(9);
    for _ in 0..20 {
        let head = random_head(12, 6, &mut r);
        let h = random_vec(6, &mut r);
        let v = random_vec(6, &mut r);
        let pts = fisher_kl_check(&head, &h, &v, &[0.02, 0.01, 0.005, 0.0025]).unwrap();
        let errs: Vec<f64> = pts.iter().map(|p| (p.ratio - 1.0).abs()).collect();
        assert!(errs[3] < 0.05, "{errs:?}");
        for w in errs.windows(2) {
            let f = w[0] / w[1];
            assert!((1.6..=2.4).contains(&f), "{errs:?}");
        }
    }
}

#[test]
fn fisher_kl_kernel_direction_is_flagged() {
    let head = ToyLMHead::new(Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.5, 0.0]).unwrap()).unwrap();
    let pts = fisher_kl_check(&head, &[0.3, 0.1], &[0.0, 1.0], &[0.1, 0.01]).unwrap();
    assert!(pts.iter().all(|p| p.degenerate() && p.kl2 == 0.0 && p.fisher == 0.0));
    assert!(fisher_kl_check(&head, &[0.3, 0.1], &[0.0, 0.0], &[0.1]).is_err());
}

#[test]
fn dv_predictor_is_identity_at_init() {
    let head = DvJepaHead::new(5, &DV_HORIZONS, &mut rng(0)).unwrap();
    let h = vec![0.1, -0.2, 0.3, 4.0, -5.0];
    for slot in 0..3 {
        assert_eq!(head.eval(&h, slot).unwrap(), h);
    }
    assert!(DvJepaHead::new(5, &[1, 2], &mut rng(0)).is_err());
    assert!(DvJepaHead::new(5, &[], &mut rng(0)).is_err());
}

#[test]
fn dv_kl_examples() {
    let eye = ToyLMHead::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let dv = DvJepaHead::new(2, &[2], &mut rng(0)).unwrap();
    let batch = batch_from(1, 3, 2, &[(0, 3)], |_, t| if t == 2 { vec![9f64.ln(), 0.0] } else { vec![0.0, 0.0] });
    let clip = eos_clip(&batch, 0, 1);
    let v = dv_jepa_kl(&batch, &clip, &eye, &dv).unwrap().value;
    let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((v - expect).abs() < 1e-14, "{v}");
    assert!((v - 0.3681).abs() < 1e-4);

    let still = batch_from(2, 10, 2, &[(1, 9), (0, 10)], |b, _| vec![b as f64, 1.0]);
    let dv = DvJepaHead::new(2, &DV_HORIZONS, &mut rng(0)).unwrap();
    let v = dv_jepa_kl(&still, &eos_clip(&still, 0, 3), &eye, &dv).unwrap().value;
    assert!(v.abs() < 1e-15, "{v}");

    let short = batch_from(1, 4, 2, &[(0, 2)], |_, _| vec![0.0, 1.0]);
    assert!(dv_jepa_kl(&short, &eos_clip(&short, 0, 1), &eye, &dv).unwrap().has_flag(EMPTY));
}

#[test]
fn horizon_pairs_respect_spans() {
    let batch = random_batch(2, 20, 2, 3);
    let clip = eos_clip(&batch, 2, 3);
    for k in DV_HORIZONS {
        for (a, b) in horizon_pairs(&batch, &clip, k) {
            assert_eq!(b - a, k);
            let row = a / 20;
            assert!(b % 20 < batch.spans()[row].hi);
            let r = clip.ranges[row];
            assert!((r.lo..r.hi).contains(&(a % 20)));
        }
    }
}

#[test]
fn dv_composite_is_kl_plus_weighted_hinge() {
    let (batch, head) = labelled_batch(10);
    let clip = eos_clip(&batch, 2, 3);
    let mut dv = DvJepaHead::new(batch.dim(), &DV_HORIZONS, &mut rng(1)).unwrap();
    dv.beta = 0.7;
    let kl = dv_jepa_kl(&batch, &clip, &head, &dv).unwrap().value;
    let hinge = dv_margin_hinge(&batch, &head, dv.margin).unwrap().value;
    let both = dv_jepa_loss(&batch, &clip, &head, &dv).unwrap();
    assert!((both.value - (kl + 0.7 * hinge)).abs() < 1e-13);
    let names: Vec<String> = both.grads.keys().cloned().collect();
    assert!(names.iter().all(|n| n == HIDDEN || n.starts_with("dvjepa.")), "{names:?}");
}

#[test]
fn decoder_visible_gradients_match_finite_differences() {
    for seed in 0..2 {
        let (batch, head) = labelled_batch(20 + seed);
        let clip = eos_clip(&batch, 2, 3);
        let ctx = FisherContext::new(head.clone(), &batch).unwrap();
        let w = batch_margin_weights(&batch, &head, MarginWeightConfig::default()).unwrap();
        check_hidden(&batch, seed, |b| fisher_jfr_family(b, &clip, &ctx, FisherVariant::Jfr, None).unwrap());
        check_hidden(&batch, seed, |b| {
            fisher_jfr_family(b, &clip, &ctx, FisherVariant::Mstb(&[1, 2, 3]), Some(&w.weights)).unwrap()
        });
        let mut bank = MemoryBank::default();
        let cfg = SynthConfig::default().with_shape(3, 24, 8).with_span(SpanPolicy::Fixed { len: 16 });
        let other = synth_batch(&cfg, 99).unwrap();
        bank.update(&other, &eos_clip(&other, 2, 3));
        let targets = local_targets(&batch, &clip, &bank);
        check_hidden(&batch, seed, |b| fisher_jfr_family(b, &clip, &ctx, FisherVariant::Local(&targets), None).unwrap());
        check_hidden(&batch, seed, |b| dv_margin_hinge(b, &head, 1.0).unwrap());

        let mut dv = DvJepaHead::new(batch.dim(), &DV_HORIZONS, &mut rng(seed)).unwrap();
        // move off the zero-initialised output so every path carries gradient
        dv.mlp.l2.weight.value = Tensor::from_fn(dv.mlp.l2.weight.value.shape(), |i| ((i * 7919) % 13) as f64 * 0.01 - 0.06);
        check_hidden(&batch, seed, |b| dv_jepa_kl_against(b, &batch, &clip, &head, &dv).unwrap());
        check_hidden(&batch, seed, |b| dv_jepa_loss_against(b, &batch, &clip, &head, &dv).unwrap());

        let e0 = dv.horizon_emb.value.clone();
        check_leaf("dvjepa.horizon", &e0, &coords(&e0, None, 12, seed), |e| {
            let mut h = dv.clone();
            h.horizon_emb.value = e.clone();
            dv_jepa_kl(&batch, &clip, &head, &h).unwrap()
        });
        for p in dv.params() {
            assert!(!p.frozen);
        }
    }
}
