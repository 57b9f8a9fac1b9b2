//! Loss registry: stable identifiers, default hyperparameters and stateful auxiliary heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensor::DualValue;

use crate::batch::{ClippedSpan, TrajectoryBatch};
use crate::dist::{
    byol_loss, cpc_loss, ijepa_loss, score_match_loss, sectional_loss, sigreg_state_loss, sigreg_tangent_loss,
    stp_cmf_loss, sw_iso_loss, vicreg_loss, ByolHeads, CpcPredictor, IjepaHeads, ScoreInput, ScoreNet,
};
use crate::dv::{batch_margin_weights, dv_jepa_loss, fisher_jfr_family, DvJepaHead, FisherContext, FisherVariant, MarginWeightConfig};
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::nn::{Module, Param};
use crate::sketch::{DirectionSet, SketchInit, Sketcher};
use crate::traj::{
    contrastive_loss, ctube_loss, dst_loss, jfr_loss, local_jfr_loss, local_targets, mstb_loss, rig_loss, stp_loss,
    ContrastiveProjector, MemoryBank, MetricHead, StencilInput, DEFAULT_LAYERS, DEFAULT_SCALES,
};

/// Every registered auxiliary loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Stp,
    Ctube,
    Rig,
    Jfr,
    LocalJfr,
    DstJfr,
    MstbJfr,
    Contrastive,
    Tpd,
    SigregState,
    SigregTangent,
    CtubeSectional,
    StpCmf,
    VicregVc,
    SwIso,
    ScoreMatch,
    Cpc,
    Byol,
    Ijepa,
    FisherJfr,
    FisherMstb,
    FisherLocalJfr,
    DvJepa,
}

/// Broad grouping used by reports and the CLI listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    TrajectoryShape,
    Distributional,
    DecoderVisible,
}

impl LossKind {
    pub const ALL: [LossKind; 23] = [
        LossKind::Stp,
        LossKind::Ctube,
        LossKind::Rig,
        LossKind::Jfr,
        LossKind::LocalJfr,
        LossKind::DstJfr,
        LossKind::MstbJfr,
        LossKind::Contrastive,
        LossKind::Tpd,
        LossKind::SigregState,
        LossKind::SigregTangent,
        LossKind::CtubeSectional,
        LossKind::StpCmf,
        LossKind::VicregVc,
        LossKind::SwIso,
        LossKind::ScoreMatch,
        LossKind::Cpc,
        LossKind::Byol,
        LossKind::Ijepa,
        LossKind::FisherJfr,
        LossKind::FisherMstb,
        LossKind::FisherLocalJfr,
        LossKind::DvJepa,
    ];

    pub fn id(self) -> &'static str {
        match self {
            LossKind::Stp => "stp",
            LossKind::Ctube => "ctube",
            LossKind::Rig => "rig",
            LossKind::Jfr => "jfr",
            LossKind::LocalJfr => "local_jfr",
            LossKind::DstJfr => "dst_jfr",
            LossKind::MstbJfr => "mstb_jfr",
            LossKind::Contrastive => "contrastive",
            LossKind::Tpd => "tpd",
            LossKind::SigregState => "sigreg_state",
            LossKind::SigregTangent => "sigreg_tangent",
            LossKind::CtubeSectional => "ctube_sectional",
            LossKind::StpCmf => "stp_cmf",
            LossKind::VicregVc => "vicreg_vc",
            LossKind::SwIso => "sw_iso",
            LossKind::ScoreMatch => "score_match",
            LossKind::Cpc => "cpc",
            LossKind::Byol => "byol",
            LossKind::Ijepa => "ijepa",
            LossKind::FisherJfr => "fisher_jfr",
            LossKind::FisherMstb => "fisher_mstb",
            LossKind::FisherLocalJfr => "fisher_local_jfr",
            LossKind::DvJepa => "dv_jepa",
        }
    }

    /// Short cell name used in result tables.
    pub fn cell(self) -> &'static str {
        match self {
            LossKind::Stp => "STP",
            LossKind::Ctube => "T1",
            LossKind::Rig => "T2",
            LossKind::Jfr => "T3",
            LossKind::LocalJfr => "T3-Local",
            LossKind::DstJfr => "T5",
            LossKind::MstbJfr => "T6",
            LossKind::Contrastive => "T7",
            LossKind::Tpd => "T9",
            LossKind::SigregState => "L1",
            LossKind::SigregTangent => "L2",
            LossKind::CtubeSectional => "L3",
            LossKind::StpCmf => "L4",
            LossKind::VicregVc => "L5",
            LossKind::SwIso => "L6",
            LossKind::ScoreMatch => "L9",
            LossKind::Cpc => "L12",
            LossKind::Byol => "L13",
            LossKind::Ijepa => "L14",
            LossKind::FisherJfr => "DV-JFR",
            LossKind::FisherMstb => "DV-MSTB",
            LossKind::FisherLocalJfr => "DV-JFR-Local",
            LossKind::DvJepa => "DV-JEPA",
        }
    }

    pub fn family(self) -> LossFamily {
        use LossKind::*;
        match self {
            Stp | Ctube | Rig | Jfr | LocalJfr | DstJfr | MstbJfr | Contrastive | Tpd => LossFamily::TrajectoryShape,
            FisherJfr | FisherMstb | FisherLocalJfr | DvJepa => LossFamily::DecoderVisible,
            _ => LossFamily::Distributional,
        }
    }

    /// Peak-weight presets; the first entry is the default.
    pub fn lambda0_presets(self) -> &'static [f64] {
        use LossKind::*;
        match self {
            Jfr | LocalJfr | MstbJfr | FisherJfr | FisherMstb | FisherLocalJfr => &[1e-3, 3e-4],
            Tpd => &[0.0],
            _ => &[1.0],
        }
    }

    pub fn default_lambda0(self) -> f64 {
        self.lambda0_presets()[0]
    }

    /// True for losses applied during decoding rather than added to the training objective.
    pub fn inference_only(self) -> bool {
        self == LossKind::Tpd
    }

    /// True for the Jacobi-stencil family that supports positional attribution.
    pub fn has_jacobi_residual(self) -> bool {
        matches!(self, LossKind::Jfr | LossKind::LocalJfr | LossKind::DstJfr | LossKind::MstbJfr)
    }

    /// True when the loss reads the frozen toy head.
    pub fn needs_head(self) -> bool {
        self.family() == LossFamily::DecoderVisible
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for LossKind {
    type Err = KitError;

    /// Accepts the identifier or the cell name, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        LossKind::ALL
            .into_iter()
            .find(|k| k.id().eq_ignore_ascii_case(key) || k.cell().eq_ignore_ascii_case(key))
            .ok_or_else(|| KitError::UnknownLoss(s.to_string()))
    }
}

/// Hyperparameters for every registered loss, with the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub sketch_dim: usize,
    pub directions: usize,
    pub metric_width: usize,
    pub metric_rank: usize,
    pub bank_capacity: usize,
    pub bank_k: usize,
    pub bank_tau: f64,
    pub scales: Vec<usize>,
    pub stencil_input: StencilInput,
    pub layers: Vec<usize>,
    pub contrastive_out: usize,
    pub contrastive_tau: f64,
    pub sectional_triples: usize,
    pub score_raw: bool,
    pub score_lambda: f64,
    pub cpc_horizon: usize,
    pub cpc_tau: f64,
    pub byol_ema: f64,
    pub ijepa_mask: f64,
    pub dv_horizons: Vec<usize>,
    pub tau_kl: f64,
    pub hinge_margin: f64,
    pub hinge_beta: f64,
    /// Scale Fisher stencil terms by low-margin weights.
    pub margin_weighting: bool,
    pub margin: MarginWeightConfig,
    /// Project the auxiliary gradient off the cross-entropy gradient when they conflict.
    pub pcgrad: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            sketch_dim: 64,
            directions: 64,
            metric_width: 64,
            metric_rank: 4,
            bank_capacity: 512,
            bank_k: 8,
            bank_tau: 0.1,
            scales: DEFAULT_SCALES.to_vec(),
            stencil_input: StencilInput::Residual,
            layers: DEFAULT_LAYERS.to_vec(),
            contrastive_out: 128,
            contrastive_tau: 0.07,
            sectional_triples: crate::dist::SECTIONAL_TRIPLES,
            score_raw: false,
            score_lambda: 1.0,
            cpc_horizon: crate::dist::CPC_HORIZON,
            cpc_tau: crate::dist::CPC_TAU,
            byol_ema: crate::dist::BYOL_EMA,
            ijepa_mask: crate::dist::IJEPA_MASK,
            dv_horizons: crate::dv::DV_HORIZONS.to_vec(),
            tau_kl: 1.0,
            hinge_margin: 1.0,
            hinge_beta: 1.0,
            margin_weighting: false,
            margin: MarginWeightConfig::default(),
            pcgrad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Heads {
    None,
    Sketch(Sketcher),
    Metric(MetricHead),
    Bank(MemoryBank),
    Contrastive(ContrastiveProjector),
    Score { sketcher: Option<Sketcher>, net: ScoreNet },
    Cpc(CpcPredictor),
    Byol(ByolHeads),
    Ijepa(IjepaHeads),
    Fisher { bank: Option<MemoryBank> },
    DvJepa(DvJepaHead),
}

/// A configured auxiliary loss together with any learnable or stateful heads it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLoss {
    pub kind: LossKind,
    pub params: LossParams,
    head: Option<ToyLMHead>,
    heads: Heads,
}

impl AuxLoss {
    /// Builds the loss for states of width `dim`. Decoder-visible losses require `head`.
    pub fn new<R: Rng + ?Sized>(
        kind: LossKind,
        params: LossParams,
        dim: usize,
        head: Option<ToyLMHead>,
        rng: &mut R,
    ) -> Result<Self> {
        if kind.inference_only() {
            return Err(KitError::Config(format!(
                "`{kind}` is applied at decoding time and has no training loss; use the tube projector directly"
            )));
        }
        if kind.needs_head() {
            match &head {
                None => return Err(KitError::Config(format!("`{kind}` needs the frozen LM head"))),
                Some(h) if h.dim() != dim => {
                    return Err(KitError::Config(format!("head dim {} does not match state dim {dim}", h.dim())))
                }
                _ => {}
            }
        }
        let p = &params;
        let bank = || MemoryBank::new(p.bank_capacity, p.bank_k, p.bank_tau);
        let heads = match kind {
            LossKind::Stp
            | LossKind::Ctube
            | LossKind::Jfr
            | LossKind::DstJfr
            | LossKind::MstbJfr
            | LossKind::CtubeSectional
            | LossKind::Tpd => Heads::None,
            LossKind::Rig => Heads::Metric(MetricHead::new(dim, p.metric_width, p.metric_rank, rng)),
            LossKind::LocalJfr => Heads::Bank(bank()?),
            LossKind::Contrastive => {
                Heads::Contrastive(ContrastiveProjector::new(dim, p.contrastive_out, p.contrastive_tau, rng))
            }
            LossKind::SigregState | LossKind::SigregTangent | LossKind::VicregVc | LossKind::SwIso => {
                Heads::Sketch(Sketcher::new("sketch", dim, p.sketch_dim, SketchInit::SmallGaussian, false, rng))
            }
            LossKind::StpCmf => Heads::Sketch(Sketcher::new("sketch", dim, p.sketch_dim, SketchInit::Xavier, true, rng)),
            LossKind::ScoreMatch => {
                if p.score_raw {
                    Heads::Score { sketcher: None, net: ScoreNet::new(dim, rng) }
                } else {
                    let s = Sketcher::new("sketch", dim, p.sketch_dim, SketchInit::SmallGaussian, false, rng);
                    Heads::Score { sketcher: Some(s), net: ScoreNet::new(p.sketch_dim, rng) }
                }
            }
            LossKind::Cpc => Heads::Cpc(CpcPredictor::new(dim, p.cpc_horizon, p.cpc_tau, rng)?),
            LossKind::Byol => {
                let mut h = ByolHeads::new(dim, rng);
                h.tau_ema = p.byol_ema;
                Heads::Byol(h)
            }
            LossKind::Ijepa => {
                let mut h = IjepaHeads::new(dim, rng);
                h.mask_ratio = p.ijepa_mask;
                Heads::Ijepa(h)
            }
            LossKind::FisherJfr | LossKind::FisherMstb => Heads::Fisher { bank: None },
            LossKind::FisherLocalJfr => Heads::Fisher { bank: Some(bank()?) },
            LossKind::DvJepa => {
                let mut h = DvJepaHead::new(dim, &p.dv_horizons, rng)?;
                h.tau_kl = p.tau_kl;
                h.margin = p.hinge_margin;
                h.beta = p.hinge_beta;
                Heads::DvJepa(h)
            }
        };
        Ok(Self { kind, params, head, heads })
    }

    /// Builds the loss with default hyperparameters.
    pub fn with_defaults<R: Rng + ?Sized>(kind: LossKind, dim: usize, head: Option<ToyLMHead>, rng: &mut R) -> Result<Self> {
        Self::new(kind, LossParams::default(), dim, head, rng)
    }

    pub fn head(&self) -> Option<&ToyLMHead> {
        self.head.as_ref()
    }

    /// The memory bank of the prompt-local variants.
    pub fn bank(&self) -> Option<&MemoryBank> {
        match &self.heads {
            Heads::Bank(b) => Some(b),
            Heads::Fisher { bank } => bank.as_ref(),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut MemoryBank> {
        match &mut self.heads {
            Heads::Bank(b) => Some(b),
            Heads::Fisher { bank } => bank.as_mut(),
            _ => None,
        }
    }

    fn fisher_ctx(&self, batch: &TrajectoryBatch) -> Result<FisherContext> {
        let head = self.head.clone().ok_or_else(|| KitError::Config(format!("`{}` needs the LM head", self.kind)))?;
        FisherContext::new(head, batch)
    }

    fn fisher_weights(&self, batch: &TrajectoryBatch) -> Result<Option<Vec<f64>>> {
        if !self.params.margin_weighting {
            return Ok(None);
        }
        let head = self.head.as_ref().ok_or_else(|| KitError::Config("margin weighting needs the LM head".into()))?;
        let w = batch_margin_weights(batch, head, self.params.margin)?;
        Ok((!w.is_empty()).then_some(w.weights))
    }

    /// Evaluates the loss; random directions and index draws come from `rng`.
    pub fn evaluate<R: Rng + ?Sized>(&self, batch: &TrajectoryBatch, clip: &ClippedSpan, rng: &mut R) -> Result<DualValue> {
        let p = &self.params;
        let dirs = |rng: &mut R| DirectionSet::sample(p.directions, p.sketch_dim, rng);
        match (&self.heads, self.kind) {
            (_, LossKind::Stp) => stp_loss(batch, clip, rng),
            (_, LossKind::Ctube) => ctube_loss(batch, clip, rng),
            (Heads::Metric(m), LossKind::Rig) => rig_loss(batch, clip, m, rng),
            (_, LossKind::Jfr) => jfr_loss(batch, clip),
            (Heads::Bank(b), LossKind::LocalJfr) => local_jfr_loss(batch, clip, b),
            (_, LossKind::DstJfr) => dst_loss(batch, clip, &p.layers),
            (_, LossKind::MstbJfr) => mstb_loss(batch, clip, &p.scales, p.stencil_input),
            (Heads::Contrastive(c), LossKind::Contrastive) => contrastive_loss(batch, clip, c),
            (Heads::Sketch(s), LossKind::SigregState) => sigreg_state_loss(batch, clip, s, &dirs(rng)),
            (Heads::Sketch(s), LossKind::SigregTangent) => sigreg_tangent_loss(batch, clip, s, &dirs(rng)),
            (_, LossKind::CtubeSectional) => sectional_loss(batch, clip, p.sectional_triples, rng),
            (Heads::Sketch(s), LossKind::StpCmf) => stp_cmf_loss(batch, clip, s, &dirs(rng)),
            (Heads::Sketch(s), LossKind::VicregVc) => vicreg_loss(batch, clip, s),
            (Heads::Sketch(s), LossKind::SwIso) => sw_iso_loss(batch, clip, s, &dirs(rng)),
            (Heads::Score { sketcher, net }, LossKind::ScoreMatch) => {
                let input = match sketcher {
                    Some(s) => ScoreInput::Sketched(s),
                    None => ScoreInput::Raw,
                };
                score_match_loss(batch, clip, input, net, p.score_lambda, rng)
            }
            (Heads::Cpc(c), LossKind::Cpc) => cpc_loss(batch, clip, c),
            (Heads::Byol(h), LossKind::Byol) => byol_loss(batch, clip, h),
            (Heads::Ijepa(h), LossKind::Ijepa) => ijepa_loss(batch, clip, h, rng),
            (Heads::Fisher { .. }, LossKind::FisherJfr) => {
                let w = self.fisher_weights(batch)?;
                fisher_jfr_family(batch, clip, &self.fisher_ctx(batch)?, FisherVariant::Jfr, w.as_deref())
            }
            (Heads::Fisher { .. }, LossKind::FisherMstb) => {
                let w = self.fisher_weights(batch)?;
                let v = FisherVariant::Mstb(&p.scales);
                fisher_jfr_family(batch, clip, &self.fisher_ctx(batch)?, v, w.as_deref())
            }
            (Heads::Fisher { bank: Some(b) }, LossKind::FisherLocalJfr) => {
                let w = self.fisher_weights(batch)?;
                let targets = local_targets(batch, clip, b);
                let v = FisherVariant::Local(&targets);
                fisher_jfr_family(batch, clip, &self.fisher_ctx(batch)?, v, w.as_deref())
            }
            (Heads::DvJepa(h), LossKind::DvJepa) => {
                let head = self.head.as_ref().ok_or_else(|| KitError::Config("dv_jepa needs the LM head".into()))?;
                dv_jepa_loss(batch, clip, head, h)
            }
            (_, kind) => Err(KitError::Config(format!("`{kind}` has no training loss"))),
        }
    }

    /// One EMA update of the tracked target; false when the loss has none.
    pub fn ema_tick(&mut self) -> bool {
        match &mut self.heads {
            Heads::Byol(h) => {
                h.ema_update();
                true
            }
            _ => false,
        }
    }

    /// State updates that follow an optimizer step: bank insertion and EMA tracking.
    pub fn after_step(&mut self, batch: &TrajectoryBatch, clip: &ClippedSpan) {
        if let Some(b) = self.bank_mut() {
            b.update(batch, clip);
        }
        self.ema_tick();
    }
}

impl Module for AuxLoss {
    fn params(&self) -> Vec<&Param> {
        match &self.heads {
            Heads::Sketch(s) => s.params(),
            Heads::Metric(m) => m.params(),
            Heads::Contrastive(c) => c.params(),
            Heads::Score { sketcher, net } => {
                let mut v = sketcher.as_ref().map(|s| s.params()).unwrap_or_default();
                v.extend(net.params());
                v
            }
            Heads::Cpc(c) => c.params(),
            Heads::Byol(h) => h.params(),
            Heads::Ijepa(h) => h.params(),
            Heads::DvJepa(h) => h.params(),
            Heads::None | Heads::Bank(_) | Heads::Fisher { .. } => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.heads {
            Heads::Sketch(s) => s.params_mut(),
            Heads::Metric(m) => m.params_mut(),
            Heads::Contrastive(c) => c.params_mut(),
            Heads::Score { sketcher, net } => {
                let mut v = sketcher.as_mut().map(|s| s.params_mut()).unwrap_or_default();
                v.extend(net.params_mut());
                v
            }
            Heads::Cpc(c) => c.params_mut(),
            Heads::Byol(h) => h.params_mut(),
            Heads::Ijepa(h) => h.params_mut(),
            Heads::DvJepa(h) => h.params_mut(),
            Heads::None | Heads::Bank(_) | Heads::Fisher { .. } => Vec::new(),
        }
    }
}
