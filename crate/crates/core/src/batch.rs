//! Hidden-state trajectories and the end-of-turn clip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tensor::Tensor;

use crate::error::{KitError, Result};

/// Half-open token range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

impl Span {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gold next-token index per position; `None` where the position is unsupervised.
pub type Labels = Vec<Vec<Option<usize>>>;

/// `B x S x D` hidden states with per-row assistant spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    hidden: Tensor,
    spans: Vec<Span>,
    layers: BTreeMap<usize, Tensor>,
    labels: Option<Labels>,
}

impl TrajectoryBatch {
    pub fn new(hidden: Tensor, spans: Vec<Span>) -> Result<Self> {
        if hidden.ndim() != 3 {
            return Err(KitError::Batch(format!(
                "hidden states must be B x S x D, got {:?}",
                hidden.shape()
            )));
        }
        let (b, s) = (hidden.shape()[0], hidden.shape()[1]);
        if spans.len() != b {
            return Err(KitError::Batch(format!(
                "{} spans for a batch of {b} rows",
                spans.len()
            )));
        }
        for (row, sp) in spans.iter().enumerate() {
            if sp.lo >= sp.hi || sp.hi > s {
                return Err(KitError::Batch(format!(
                    "row {row}: span [{}, {}) is not inside [0, {s}) or is empty",
                    sp.lo, sp.hi
                )));
            }
        }
        if !hidden.is_finite() {
            return Err(KitError::Batch("hidden states contain non-finite values".into()));
        }
        Ok(Self {
            hidden,
            spans,
            layers: BTreeMap::new(),
            labels: None,
        })
    }

    pub fn with_layer(mut self, layer: usize, states: Tensor) -> Result<Self> {
        if states.shape() != self.hidden.shape() {
            return Err(KitError::Batch(format!(
                "layer {layer} has shape {:?}, hidden is {:?}",
                states.shape(),
                self.hidden.shape()
            )));
        }
        self.layers.insert(layer, states);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if labels.len() != self.batch_size() || labels.iter().any(|r| r.len() != self.seq_len()) {
            return Err(KitError::Batch("labels must be B x S".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn batch_size(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.hidden.shape()[2]
    }

    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn layers(&self) -> &BTreeMap<usize, Tensor> {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> Result<&Tensor> {
        self.layers.get(&layer).ok_or(KitError::MissingLayer(layer))
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    /// Hidden state at row `b`, absolute position `t`.
    pub fn state(&self, b: usize, t: usize) -> &[f64] {
        let d = self.dim();
        let start = (b * self.seq_len() + t) * d;
        &self.hidden.data()[start..start + d]
    }

    /// Flat row index into the `[B*S, D]` view.
    pub fn flat(&self, b: usize, t: usize) -> usize {
        b * self.seq_len() + t
    }

    /// Replace the hidden states, keeping spans, layers and labels.
    pub fn set_hidden(&mut self, hidden: Tensor) -> Result<()> {
        if hidden.shape() != self.hidden.shape() {
            return Err(KitError::Batch(format!(
                "replacement hidden states {:?} do not match {:?}",
                hidden.shape(),
                self.hidden.shape()
            )));
        }
        self.hidden = hidden;
        Ok(())
    }

    /// Replace one existing layer of the stack.
    pub fn set_layer(&mut self, layer: usize, states: Tensor) -> Result<()> {
        let slot = self.layers.get_mut(&layer).ok_or(KitError::MissingLayer(layer))?;
        if states.shape() != slot.shape() {
            return Err(KitError::Batch(format!(
                "replacement layer {layer} {:?} does not match {:?}",
                states.shape(),
                slot.shape()
            )));
        }
        *slot = states;
        Ok(())
    }

    /// Same spans and labels with `hidden` swapped for a layer tensor.
    pub fn with_hidden_from_layer(&self, layer: usize) -> Result<TrajectoryBatch> {
        let mut out = self.clone();
        out.hidden = self.layer(layer)?.clone();
        Ok(out)
    }
}

/// Spans after removing the last `margin` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSpan {
    pub ranges: Vec<Span>,
    pub dropped: Vec<bool>,
    pub margin: usize,
    pub min_len: usize,
}

impl ClippedSpan {
    /// `(row, range)` for every row that survived the clip.
    pub fn active(&self) -> impl Iterator<Item = (usize, Span)> + '_ {
        self.ranges
            .iter()
            .zip(&self.dropped)
            .enumerate()
            .filter(|(_, (_, d))| !**d)
            .map(|(b, (r, _))| (b, *r))
    }

    pub fn active_count(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }

    /// Active rows whose clipped length is at least `n`.
    pub fn rows_with_len(&self, n: usize) -> Vec<(usize, Span)> {
        self.active().filter(|(_, r)| r.len() >= n).collect()
    }
}

/// Remove `margin` positions from the right of every span; rows left shorter than
/// `min_len` are dropped.
pub fn eos_clip(batch: &TrajectoryBatch, margin: usize, min_len: usize) -> ClippedSpan {
    let mut ranges = Vec::with_capacity(batch.batch_size());
    let mut dropped = Vec::with_capacity(batch.batch_size());
    for sp in batch.spans() {
        let hi = sp.hi.saturating_sub(margin).max(sp.lo);
        let r = Span::new(sp.lo, hi);
        dropped.push(r.len() < min_len);
        ranges.push(r);
    }
    ClippedSpan {
        ranges,
        dropped,
        margin,
        min_len,
    }
}

/// Default clip: margin 2, minimum length 3.
pub fn default_clip(batch: &TrajectoryBatch) -> ClippedSpan {
    eos_clip(batch, 2, 3)
}
