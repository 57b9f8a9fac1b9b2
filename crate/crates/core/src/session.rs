//! Handle-based access for host training loops: one session owns the auxiliary
//! head state of one loss across calls.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::Tensor;

use crate::batch::{eos_clip, ClippedSpan, Labels, Span, TrajectoryBatch};
use crate::diagnostics::{diagnose, hidden_gradient, DiagnosticsReport, DEFAULT_MAX_PAIRS};
use crate::error::{KitError, Result};
use crate::head::ToyLMHead;
use crate::registry::{AuxLoss, LossKind, LossParams};

/// Borrowed `B x S x D` hidden states with their spans.
#[derive(Debug, Clone, Copy)]
pub struct BufferView<'a> {
    pub data: &'a [f64],
    pub shape: [usize; 3],
    /// Half-open `[lo, hi)` assistant span per row.
    pub spans: &'a [(usize, usize)],
}

impl<'a> BufferView<'a> {
    pub fn new(data: &'a [f64], shape: [usize; 3], spans: &'a [(usize, usize)]) -> Self {
        Self { data, shape, spans }
    }

    fn to_batch(self, labels: Option<&Labels>) -> Result<TrajectoryBatch> {
        let n: usize = self.shape.iter().product();
        if self.data.len() != n {
            return Err(KitError::Batch(format!(
                "buffer holds {} values but shape {:?} needs {n}",
                self.data.len(),
                self.shape
            )));
        }
        let hidden = Tensor::new(self.shape.to_vec(), self.data.to_vec())?;
        let spans = self.spans.iter().map(|&(lo, hi)| Span::new(lo, hi)).collect();
        let batch = TrajectoryBatch::new(hidden, spans)?;
        match labels {
            Some(l) => batch.with_labels(l.clone()),
            None => Ok(batch),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub value: f64,
    /// `dL/dh`, same layout as the input buffer.
    pub grad: Vec<f64>,
    pub flags: Vec<String>,
}

/// Clip applied to every buffer evaluated through a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRule {
    pub margin: usize,
    pub min_len: usize,
}

impl Default for ClipRule {
    fn default() -> Self {
        Self { margin: 2, min_len: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    aux: AuxLoss,
    rng: ChaCha8Rng,
    pub clip: ClipRule,
}

/// Opens a session for the loss `id` on states of width `dim`.
pub fn open_session(
    id: &str,
    params: LossParams,
    dim: usize,
    head: Option<ToyLMHead>,
    seed: u64,
) -> Result<Session> {
    let kind: LossKind = id.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aux = AuxLoss::new(kind, params, dim, head, &mut rng)?;
    Ok(Session { aux, rng, clip: ClipRule::default() })
}

impl Session {
    pub fn kind(&self) -> LossKind {
        self.aux.kind
    }

    pub fn loss(&self) -> &AuxLoss {
        &self.aux
    }

    /// True when the loss keeps state between calls (memory bank, EMA target or learnable heads).
    pub fn is_stateful(&self) -> bool {
        use crate::nn::Module;
        self.aux.bank().is_some() || !self.aux.params().is_empty()
    }

    pub fn bank_len(&self) -> Option<usize> {
        self.aux.bank().map(|b| b.len())
    }

    fn clip_of(&self, batch: &TrajectoryBatch) -> ClippedSpan {
        eos_clip(batch, self.clip.margin, self.clip.min_len)
    }

    fn check_dim(&self, view: &BufferView<'_>) -> Result<()> {
        if let Some(d) = self.aux.head().map(|h| h.dim()) {
            if d != view.shape[2] {
                return Err(KitError::Batch(format!("buffer width {} does not match head dim {d}", view.shape[2])));
            }
        }
        Ok(())
    }

    /// Loss value and gradient with respect to the buffer. Session state is untouched.
    pub fn eval_with_grad(&mut self, view: BufferView<'_>, labels: Option<&Labels>) -> Result<EvalOutput> {
        self.check_dim(&view)?;
        let batch = view.to_batch(labels)?;
        let clip = self.clip_of(&batch);
        let d = self.aux.evaluate(&batch, &clip, &mut self.rng)?;
        let grad = hidden_gradient(&d, &batch).into_data();
        Ok(EvalOutput { value: d.value, grad, flags: d.flags.into_iter().collect() })
    }

    /// One EMA update of the tracked target network; false when the loss has none.
    pub fn ema_tick(&mut self) -> bool {
        self.aux.ema_tick()
    }

    /// Inserts the clipped trajectories of the buffer into the memory bank.
    pub fn bank_insert(&mut self, view: BufferView<'_>) -> Result<usize> {
        let batch = view.to_batch(None)?;
        let clip = self.clip_of(&batch);
        let kind = self.aux.kind;
        let bank = self
            .aux
            .bank_mut()
            .ok_or_else(|| KitError::Config(format!("`{kind}` has no memory bank")))?;
        if !bank.is_empty() && bank.entries().next().is_some_and(|e| e.anchor.len() != batch.dim()) {
            return Err(KitError::Batch("buffer width does not match the bank".into()));
        }
        bank.update(&batch, &clip);
        Ok(bank.len())
    }

    pub fn diagnose(&mut self, view: BufferView<'_>, labels: Option<&Labels>) -> Result<DiagnosticsReport> {
        self.check_dim(&view)?;
        let batch = view.to_batch(labels)?;
        let clip = self.clip_of(&batch);
        diagnose(&batch, &clip, Some(&self.aux), None, DEFAULT_MAX_PAIRS, &mut self.rng)
    }

    /// Releases the session and its head state.
    pub fn close(self) {}
}
