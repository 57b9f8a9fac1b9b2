//! Trajectory-shape losses.

pub mod bank;
pub mod contrastive;
pub mod jacobi;
pub mod jfr;
pub mod shape;
pub mod tpd;

pub use bank::{anchor, BankEntry, MemoryBank, RowTarget};
pub use contrastive::{contrastive_loss, halves, info_nce, info_nce_symmetric, ContrastiveProjector};
pub use jfr::{
    dst_loss, jfr_loss, layer_leaf, local_jfr_loss, local_jfr_with_targets, local_targets, mstb_loss, StencilInput,
    DEFAULT_LAYERS, DEFAULT_SCALES, FALLBACK,
};
pub use shape::{ctube_loss, metric_cosine, rig_loss, rig_plain_loss, stp_loss, MetricHead};
pub use tpd::{Shrink, TubeProjector};
