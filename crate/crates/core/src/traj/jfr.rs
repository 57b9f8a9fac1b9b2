//! Jacobi-field regularisers: batch, prompt-local, layer-averaged and multi-scale.

use serde::{Deserialize, Serialize};
use tensor::{DualValue, Var};

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::error::Result;
use crate::nn::{bind_hidden, Graph, HIDDEN};
use crate::traj::bank::{anchor, MemoryBank, RowTarget};
use crate::traj::jacobi::{self, Centroid};

/// Flag set when some rows (or all) used the batch centroid instead of retrieved targets.
pub const FALLBACK: &str = "fallback";

/// Whether the strided stencil sees Jacobi residuals or raw states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilInput {
    #[default]
    Residual,
    Raw,
}

pub const DEFAULT_SCALES: [usize; 3] = [1, 2, 3];
pub const DEFAULT_LAYERS: [usize; 4] = [4, 8, 12, 16];

fn stencil_loss(
    g: &mut Graph,
    hf: Var,
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    centroid: Centroid<'_>,
    scales: &[usize],
) -> Result<(Option<Var>, Vec<usize>)> {
    let set = jacobi::build(g, hf, batch, clip, centroid, scales)?;
    let parts = set
        .scales
        .iter()
        .map(|st| jacobi::euclid_mean(g, st))
        .collect::<Result<Vec<_>>>()?;
    Ok((jacobi::mean_of(g, &parts)?, set.fallback_rows))
}

/// Mean squared central second difference of batch-centroid residuals.
pub fn jfr_loss(batch: &TrajectoryBatch, clip: &ClippedSpan) -> Result<DualValue> {
    mstb_loss(batch, clip, &[1], StencilInput::Residual)
}

/// Mean over usable scales of the `delta^-2`-normalised strided stencil.
pub fn mstb_loss(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    scales: &[usize],
    input: StencilInput,
) -> Result<DualValue> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let centroid = match input {
        StencilInput::Residual => Centroid::Batch,
        StencilInput::Raw => Centroid::Raw,
    };
    match stencil_loss(&mut g, hf, batch, clip, centroid, scales)?.0 {
        Some(root) => g.finish(root),
        None => Ok(g.empty()),
    }
}

/// Retrieved stop-gradient targets for every row (`None` for dropped rows or an empty bank).
pub fn local_targets(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    bank: &MemoryBank,
) -> Vec<Option<RowTarget>> {
    (0..batch.batch_size())
        .map(|b| {
            if clip.dropped[b] {
                None
            } else {
                bank.target(&anchor(batch, clip, b))
            }
        })
        .collect()
}

/// JFR stencil on residuals against retrieval-weighted neighbour trajectories.
/// Call [`MemoryBank::update`] after the step so a row never retrieves itself.
pub fn local_jfr_loss(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    bank: &MemoryBank,
) -> Result<DualValue> {
    local_jfr_with_targets(batch, clip, &local_targets(batch, clip, bank))
}

/// Local JFR against precomputed targets; rows with `None` use the batch centroid.
pub fn local_jfr_with_targets(
    batch: &TrajectoryBatch,
    clip: &ClippedSpan,
    targets: &[Option<RowTarget>],
) -> Result<DualValue> {
    let mut g = Graph::new();
    let hf = bind_hidden(&mut g, batch)?;
    let (root, fallback) =
        stencil_loss(&mut g, hf, batch, clip, Centroid::Local(targets), &[1])?;
    let out = match root {
        Some(root) => g.finish(root)?,
        None => g.empty(),
    };
    Ok(if fallback.is_empty() {
        out
    } else {
        out.with_flag(FALLBACK)
    })
}

/// Leaf name for a layer of the stack.
pub fn layer_leaf(layer: usize) -> String {
    format!("layer.{layer}")
}

/// Uniform mean of the JFR loss over the requested layers. Gradients are
/// reported per layer under [`layer_leaf`] names; the hidden leaf is present with
/// zero gradient.
pub fn dst_loss(batch: &TrajectoryBatch, clip: &ClippedSpan, layers: &[usize]) -> Result<DualValue> {
    let mut tensors = Vec::with_capacity(layers.len());
    for &l in layers {
        tensors.push(batch.layer(l)?.clone());
    }
    let mut g = Graph::new();
    g.input(HIDDEN, batch.hidden().clone());
    let shape = [batch.batch_size() * batch.seq_len(), batch.dim()];
    let mut parts = Vec::new();
    for (l, t) in layers.iter().zip(tensors) {
        let leaf = g.input(&layer_leaf(*l), t);
        let hf = g.tape.reshape(leaf, &shape)?;
        if let (Some(v), _) = stencil_loss(&mut g, hf, batch, clip, Centroid::Batch, &[1])? {
            parts.push(v);
        }
    }
    // every layer shares the same stencil set, so either all or none contribute
    match jacobi::mean_of(&mut g, &parts)? {
        Some(root) => g.finish(root),
        None => Ok(g.empty()),
    }
}
