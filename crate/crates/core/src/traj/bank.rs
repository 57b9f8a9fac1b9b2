//! Memory bank of past trajectories for prompt-local centroids.

use std::collections::VecDeque;

use tensor::Tensor;

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::{KitError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub anchor: Vec<f64>,
    /// Clipped span states, `[L, D]`.
    pub trajectory: Tensor,
}

impl BankEntry {
    pub fn len(&self) -> usize {
        self.trajectory.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub capacity: usize,
    pub k: usize,
    pub tau: f64,
    entries: VecDeque<BankEntry>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new(512, 8, 0.1).expect("valid defaults")
    }
}

/// Retrieval-weighted centroid for one query row, in clipped-span coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTarget {
    /// `[Lc, D]`, defined only where every neighbour covers the position.
    pub centroid: Tensor,
    pub neighbours: Vec<(usize, f64)>,
}

impl MemoryBank {
    pub fn new(capacity: usize, k: usize, tau: f64) -> Result<Self> {
        if capacity == 0 || k == 0 || tau <= 0.0 {
            return Err(KitError::Config(format!(
                "memory bank needs capacity > 0, k > 0, tau > 0 (got {capacity}, {k}, {tau})"
            )));
        }
        Ok(Self {
            capacity,
            k,
            tau,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, entry: BankEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Top-`k` entries by anchor cosine with softmax(cos / tau) weights,
    /// most similar first. `k` is clamped to the bank size.
    pub fn retrieve(&self, anchor: &[f64]) -> Vec<(usize, f64)> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        let mut sims: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(anchor, &e.anchor)))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1));
        sims.truncate(self.k.min(sims.len()));
        let top = sims[0].1;
        let e: Vec<f64> = sims.iter().map(|(_, s)| ((s - top) / self.tau).exp()).collect();
        let z: f64 = e.iter().sum();
        sims.iter().zip(e).map(|((i, _), w)| (*i, w / z)).collect()
    }

    /// Weighted neighbour trajectory for `anchor`, or `None` when the bank is empty.
    pub fn target(&self, anchor: &[f64]) -> Option<RowTarget> {
        let neighbours = self.retrieve(anchor);
        let first = neighbours.first()?;
        let d = self.entries[first.0].trajectory.shape()[1];
        let lc = neighbours
            .iter()
            .map(|(i, _)| self.entries[*i].len())
            .min()
            .unwrap_or(0);
        let mut centroid = Tensor::zeros(&[lc, d]);
        for (i, w) in &neighbours {
            let h = &self.entries[*i].trajectory;
            for (c, x) in centroid.data_mut().iter_mut().zip(&h.data()[..lc * d]) {
                *c += w * x;
            }
        }
        Some(RowTarget {
            centroid,
            neighbours,
        })
    }

    /// Insert one entry per surviving row, evicting the oldest beyond capacity.
    pub fn update(&mut self, batch: &TrajectoryBatch, clip: &ClippedSpan) {
        for (b, r) in clip.active() {
            let d = batch.dim();
            let mut data = Vec::with_capacity(r.len() * d);
            for t in r.lo..r.hi {
                data.extend_from_slice(batch.state(b, t));
            }
            let trajectory = Tensor::new(vec![r.len(), d], data).expect("sized above");
            self.push(BankEntry {
                anchor: anchor(batch, clip, b),
                trajectory,
            });
        }
    }
}

/// Mean of the prompt states before the span; falls back to the clipped span
/// mean when the span starts at position 0.
pub fn anchor(batch: &TrajectoryBatch, clip: &ClippedSpan, b: usize) -> Vec<f64> {
    let sp = batch.spans()[b];
    let (lo, hi) = if sp.lo > 0 {
        (0, sp.lo)
    } else {
        (clip.ranges[b].lo, clip.ranges[b].hi.max(clip.ranges[b].lo + 1))
    };
    let mut a = vec![0.0; batch.dim()];
    for t in lo..hi {
        for (x, y) in a.iter_mut().zip(batch.state(b, t)) {
            *x += y;
        }
    }
    let n = (hi - lo) as f64;
    a.iter_mut().for_each(|x| *x /= n);
    a
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(anchor: Vec<f64>, len: usize) -> BankEntry {
        BankEntry {
            trajectory: Tensor::from_fn(&[len, anchor.len()], |i| i as f64),
            anchor,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(3, 1, 0.1).unwrap();
        for i in 0..4 {
            bank.push(entry(vec![i as f64, 1.0], 2));
        }
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.entries().next().unwrap().anchor[0], 1.0);
    }

    #[test]
    fn k_clamps_to_bank_size() {
        let mut bank = MemoryBank::new(8, 8, 0.1).unwrap();
        bank.push(entry(vec![1.0, 0.0], 3));
        bank.push(entry(vec![0.0, 1.0], 3));
        assert_eq!(bank.retrieve(&[1.0, 1.0]).len(), 2);
    }

    #[test]
    fn reset_empties() {
        let mut bank = MemoryBank::default();
        bank.push(entry(vec![1.0], 2));
        bank.reset();
        assert!(bank.target(&[1.0]).is_none());
    }

    #[test]
    fn centroid_truncates_to_shortest_neighbour() {
        let mut bank = MemoryBank::new(8, 2, 0.1).unwrap();
        bank.push(entry(vec![1.0, 0.0], 5));
        bank.push(entry(vec![1.0, 0.1], 3));
        let t = bank.target(&[1.0, 0.0]).unwrap();
        assert_eq!(t.centroid.shape(), &[3, 2]);
    }
}
