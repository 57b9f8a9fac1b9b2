//! Auxiliary losses on hidden-state trajectories, their diagnostics, and the
//! pieces needed to drive them in a toy descent loop.

pub mod batch;
pub mod dist;
pub mod demo;
pub mod diagnostics;
pub mod dv;
pub mod error;
pub mod head;
pub mod io;
pub mod nn;
pub mod registry;
pub mod schedule;
pub mod session;
pub mod sketch;
pub mod synth;
pub mod traj;

pub use batch::{default_clip, eos_clip, ClippedSpan, Labels, Span, TrajectoryBatch};
pub use error::{KitError, Result};
pub use head::{head_logits, ToyLMHead};
pub use nn::{Graph, Module, Param, EMPTY, HIDDEN};
pub use sketch::{DirectionSet, SketchInit, Sketcher};
pub use synth::{synth_batch, SpanPolicy, SynthConfig};
pub use tensor::{DualValue, Tensor};
