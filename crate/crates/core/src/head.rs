//! Frozen toy LM head standing in for the decoder projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tensor::{Tape, Tensor, Var};

use crate::error::{KitError, Result};

/// `V x D` projection without bias. Never receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLMHead {
    w: Tensor,
    pub temperature: f64,
}

impl ToyLMHead {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.ndim() != 2 || !w.is_finite() {
            return Err(KitError::Config(format!(
                "head weight must be a finite V x D matrix, got {:?}",
                w.shape()
            )));
        }
        Ok(Self { w, temperature: 1.0 })
    }

    /// Gaussian entries with standard deviation `2 / sqrt(D)`.
    pub fn seeded(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 2.0 / (dim as f64).sqrt();
        let w = Tensor::from_fn(&[vocab, dim], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        });
        Self { w, temperature: 1.0 }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn vocab(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Logits for a single state.
    pub fn logits_of(&self, h: &[f64]) -> Vec<f64> {
        (0..self.vocab())
            .map(|v| self.w.row(v).iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Next-token distribution at temperature `self.temperature`.
    pub fn probs_of(&self, h: &[f64]) -> Vec<f64> {
        softmax_vec(&self.logits_of(h), self.temperature)
    }

    /// `[N, D]` states on a tape to `[N, V]` logits; the weight enters as a constant.
    pub fn logits_on(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let wt = tape.constant(self.w.transpose()?);
        Ok(tape.matmul(h, wt)?)
    }
}

/// `h W^T` over the last axis of `h`.
pub fn head_logits(head: &ToyLMHead, h: &Tensor) -> Result<Tensor> {
    let d = head.dim();
    if h.shape().last() != Some(&d) {
        return Err(KitError::Tensor(tensor::TensorError::ShapeMismatch {
            op: "head_logits",
            lhs: h.shape().to_vec(),
            rhs: head.w.shape().to_vec(),
        }));
    }
    let rows = h.numel() / d;
    let flat = h.reshape(&[rows, d])?;
    let z = flat.matmul(&head.w.transpose()?)?;
    let mut shape = h.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = head.vocab();
    Ok(z.reshape(&shape)?)
}

/// Numerically stable softmax of a slice at temperature `tau`.
pub fn softmax_vec(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_gives_zero_logits() {
        let head = ToyLMHead::seeded(8, 4, 1);
        let z = head_logits(&head, &Tensor::zeros(&[2, 3, 4])).unwrap();
        assert_eq!(z.shape(), &[2, 3, 8]);
        assert!(z.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_block_passes_basis_vectors() {
        let mut w = Tensor::zeros(&[5, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let head = ToyLMHead::new(w).unwrap();
        let z = head_logits(&head, &Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let head = ToyLMHead::seeded(8, 4, 1);
        assert!(head_logits(&head, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn probabilities_normalise() {
        let head = ToyLMHead::seeded(64, 32, 9);
        let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let p = head.probs_of(&h);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
