//! Inference-time tube projection of decoded states.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{KitError, Result};

/// Shrink profile applied to the orthogonal step component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shrink {
    /// `alpha(r) = min(1, 1/r)`; the orthogonal step never exceeds the radius.
    HardClip,
    /// `alpha(r) = tanh(r) / r`.
    Smooth,
}

impl Shrink {
    pub fn alpha(self, r: f64) -> f64 {
        match self {
            Shrink::HardClip => {
                if r <= 1.0 {
                    1.0
                } else {
                    1.0 / r
                }
            }
            Shrink::Smooth => {
                if r < 1e-12 {
                    1.0
                } else {
                    r.tanh() / r
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeProjector {
    pub eps: f64,
    pub k: usize,
    pub shrink: Shrink,
    history: VecDeque<Vec<f64>>,
}

impl TubeProjector {
    pub fn new(eps: f64, k: usize, shrink: Shrink) -> Result<Self> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(KitError::Config(format!("tube radius must be positive, got {eps}")));
        }
        if k < 2 {
            return Err(KitError::Config(format!("history length must be at least 2, got {k}")));
        }
        Ok(Self {
            eps,
            k,
            shrink,
            history: VecDeque::with_capacity(k),
        })
    }

    pub fn history(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter()
    }

    /// Unit mean increment of the history, if at least two states are present.
    pub fn tangent(&self) -> Option<Vec<f64>> {
        if self.history.len() < 2 {
            return None;
        }
        let first = self.history.front()?;
        let last = self.history.back()?;
        let n = (self.history.len() - 1) as f64;
        let m: Vec<f64> = last.iter().zip(first).map(|(a, b)| (a - b) / n).collect();
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 1e-12).then(|| m.into_iter().map(|x| x / norm).collect())
    }

    /// Project without touching the history.
    pub fn project_frozen(&self, h_raw: &[f64]) -> Vec<f64> {
        let (Some(prev), Some(tan)) = (self.history.back(), self.tangent()) else {
            return h_raw.to_vec();
        };
        let v: Vec<f64> = h_raw.iter().zip(prev).map(|(a, b)| a - b).collect();
        let along: f64 = v.iter().zip(&tan).map(|(a, b)| a * b).sum();
        let perp: Vec<f64> = v.iter().zip(&tan).map(|(a, t)| a - along * t).collect();
        let r = perp.iter().map(|x| x * x).sum::<f64>().sqrt() / self.eps;
        let a = self.shrink.alpha(r);
        if a == 1.0 {
            return h_raw.to_vec();
        }
        prev.iter()
            .zip(&tan)
            .zip(&perp)
            .map(|((p, t), q)| p + along * t + a * q)
            .collect()
    }

    /// Project and append the result to the history.
    pub fn project(&mut self, h_raw: &[f64]) -> Vec<f64> {
        let out = self.project_frozen(h_raw);
        self.history.push_back(out.clone());
        if self.history.len() > self.k {
            self.history.pop_front();
        }
        out
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}
