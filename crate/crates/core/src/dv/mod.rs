//! Decoder-visible losses: Fisher pull-back metric, margin weighting, PCGrad and DV-JEPA.

mod fisher;
mod jepa;
mod margin;

pub use fisher::{
    dense_fisher, fisher_jfr_family, fisher_kl_check, fisher_norm_sq, fisher_rows, FisherContext,
    FisherVariant, KlPoint,
};
pub use jepa::{
    dv_jepa_kl, dv_jepa_kl_against, dv_jepa_loss, dv_jepa_loss_against, horizon_pairs, DvJepaHead,
    DV_HORIZONS, DV_WIDTH,
};
pub use margin::{
    batch_margin_weights, dv_margin_hinge, hinge_on, margin_hinge_value, margin_of, margin_weights,
    pcgrad, quantile_linear, supervised_positions, MarginWeightConfig, MarginWeights, PCGRAD_EPS,
};
