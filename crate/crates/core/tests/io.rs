mod common;

use common::*;
use proptest::prelude::*;
use tensor::Tensor;
use tubekit::io::{from_text, load, read_binary, save, to_text, write_binary};
use tubekit::{synth_batch, KitError, Span, SynthConfig, TrajectoryBatch};

fn binary_round_trip(b: &TrajectoryBatch) -> TrajectoryBatch {
    let mut buf = Vec::new();
    write_binary(b, &mut buf).unwrap();
    read_binary(buf.as_slice()).unwrap()
}

#[test]
fn synthetic_batches_round_trip_bit_exactly() {
    let cfg = SynthConfig::default().with_shape(3, 30, 5);
    let b = synth_batch(&cfg, 2).unwrap();
    assert!(b.labels().is_some() && !b.layers().is_empty());
    assert_eq!(binary_round_trip(&b), b);
    assert_eq!(from_text(&to_text(&b)).unwrap(), b);
}

#[test]
fn plain_batches_round_trip() {
    let b = random_batch(2, 10, 3, 4);
    assert_eq!(binary_round_trip(&b), b);
    assert_eq!(from_text(&to_text(&b)).unwrap(), b);
}

#[test]
fn files_pick_format_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth_batch(&SynthConfig::default().with_shape(2, 30, 4), 1).unwrap();
    for name in ["batch.bin", "batch.txt"] {
        let p = dir.path().join(name);
        save(&b, &p).unwrap();
        assert_eq!(load(&p).unwrap(), b);
    }
    let text = std::fs::read_to_string(dir.path().join("batch.txt")).unwrap();
    assert!(text.starts_with("trajectory-batch 1"));
    let bin = std::fs::read(dir.path().join("batch.bin")).unwrap();
    assert_eq!(&bin[..4], b"TRJB");
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(matches!(read_binary(&b"NOPE"[..]), Err(KitError::Format(_)) | Err(KitError::Io(_))));
    let b = random_batch(1, 6, 2, 0);
    let mut buf = Vec::new();
    write_binary(&b, &mut buf).unwrap();
    buf.truncate(buf.len() - 5);
    assert!(read_binary(buf.as_slice()).is_err());
    assert!(from_text("").is_err());
    assert!(from_text("trajectory-batch 1\nshape 1 2 1\nspan 0 0 3\nh 0 0 1\nh 0 1 2\n").is_err());
    assert!(from_text("trajectory-batch 2\nshape 1 1 1\n").is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load(std::path::Path::new("/nonexistent/batch.bin")).unwrap_err();
    assert!(matches!(err, KitError::Io(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_finite_batches_round_trip(
        b in 1usize..4,
        s in 2usize..9,
        d in 1usize..5,
        seed in any::<u64>(),
        scale in -300i32..300,
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let f = 2f64.powi(scale);
        let hidden = Tensor::from_fn(&[b, s, d], |_| r.random_range(-1.0..1.0) * f);
        let spans = (0..b).map(|_| { let lo = r.random_range(0..s - 1); Span::new(lo, r.random_range(lo + 1..=s)) }).collect();
        let labels = (0..b).map(|_| (0..s).map(|_| r.random_bool(0.5).then(|| r.random_range(0..100))).collect()).collect();
        let batch = TrajectoryBatch::new(hidden.clone(), spans).unwrap()
            .with_labels(labels).unwrap()
            .with_layer(3, hidden.map(|x| -x)).unwrap();
        prop_assert_eq!(&binary_round_trip(&batch), &batch);
        prop_assert_eq!(&from_text(&to_text(&batch)).unwrap(), &batch);
    }
}
