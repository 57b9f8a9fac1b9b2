//! Library side of every subcommand; the binary only parses flags and prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use stats::{build_report, render_text, Report, ReportOptions};
use tubekit::demo::{train_demo, StepRecord};
use tubekit::diagnostics::{diagnose as run_diagnose, hidden_gradient, DiagnosticsReport, DEFAULT_MAX_PAIRS};
use tubekit::dv::fisher_kl_check;
use tubekit::registry::AuxLoss;
use tubekit::{eos_clip, io, synth_batch, TrajectoryBatch};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const SCHEMA: u32 = 1;

/// Versioned envelope around every command's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<T> {
    pub schema: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub results: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl<T> RunRecord<T> {
    pub fn new(command: &str, config: serde_json::Value, results: T) -> Self {
        Self { schema: SCHEMA, command: command.into(), config, results, created_unix: None, wall_time_s: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub seed: u64,
    pub loss: String,
    pub value: f64,
    /// Euclidean norm of the gradient with respect to the final-layer states.
    pub grad_norm: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoResult {
    pub seed: u64,
    pub aux_reduction: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub diagnostics: DiagnosticsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseResult {
    pub source: String,
    pub seed: Option<u64>,
    pub report: DiagnosticsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherPoint {
    pub scale: f64,
    pub kl2: f64,
    pub fisher: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub seed: u64,
    pub points: Vec<FisherPoint>,
    /// `|ratio_i - 1| / |ratio_{i-1} - 1|` for consecutive scales.
    pub deviation_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub seed: u64,
    pub path: PathBuf,
    pub shape: [usize; 3],
    pub spans: Vec<(usize, usize)>,
    pub labels: bool,
    pub layers: Vec<usize>,
}

fn batch_for(cfg: &ExperimentConfig, seed: u64) -> Result<TrajectoryBatch> {
    Ok(synth_batch(&cfg.synth, seed)?)
}

/// One forward and backward evaluation per seed. The loss is built and evaluated from
/// a generator seeded with the run seed, exactly as a session opened with that seed.
pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<EvalResult>> {
    let kind = cfg.kind()?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let batch = batch_for(cfg, seed)?;
            let head = kind.needs_head().then(|| cfg.synth.reference_head());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let aux = AuxLoss::new(kind, cfg.params.clone(), batch.dim(), head, &mut rng)?;
            let clip = eos_clip(&batch, cfg.clip_margin, cfg.min_len);
            let d = aux.evaluate(&batch, &clip, &mut rng)?;
            let g = hidden_gradient(&d, &batch);
            Ok(EvalResult {
                seed,
                loss: kind.id().to_string(),
                value: d.value,
                grad_norm: g.data().iter().map(|x| x * x).sum::<f64>().sqrt(),
                flags: d.flags.into_iter().collect(),
            })
        })
        .collect()
}

/// Descent runs, one thread per seed, merged in seed order.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<DemoResult>> {
    let demo = cfg.demo_config()?;
    let outcomes: Vec<tubekit::Result<DemoResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let demo = &demo;
                s.spawn(move || {
                    train_demo(demo, seed).map(|run| DemoResult {
                        seed,
                        aux_reduction: run.aux_reduction(),
                        steps: run.steps,
                        diagnostics: run.diagnostics,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("demo thread panicked")).collect()
    });
    outcomes.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn diagnose_batch(cfg: &ExperimentConfig, batch: &TrajectoryBatch, seed: u64) -> Result<DiagnosticsReport> {
    let kind = cfg.kind()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = cfg.synth.reference_head();
    let head = (head.dim() == batch.dim()).then_some(head);
    let aux_head = if kind.needs_head() { head.clone() } else { None };
    let aux = AuxLoss::new(kind, cfg.params.clone(), batch.dim(), aux_head, &mut rng)?;
    let clip = eos_clip(batch, cfg.clip_margin, cfg.min_len);
    Ok(run_diagnose(batch, &clip, Some(&aux), head.as_ref(), DEFAULT_MAX_PAIRS, &mut rng)?)
}

/// Diagnostics of a saved run record (`.json`), a saved batch, or synthetic batches per seed.
pub fn diagnose(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<Vec<DiagnoseResult>> {
    match input {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = std::fs::read_to_string(p)?;
            let rec: RunRecord<Vec<DemoResult>> = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{} is not a train-demo record: {e}", p.display())))?;
            Ok(rec
                .results
                .into_iter()
                .map(|r| DiagnoseResult { source: p.display().to_string(), seed: Some(r.seed), report: r.diagnostics })
                .collect())
        }
        Some(p) => {
            let batch = io::load(p)?;
            let report = diagnose_batch(cfg, &batch, cfg.seeds[0])?;
            Ok(vec![DiagnoseResult { source: p.display().to_string(), seed: None, report }])
        }
        None => cfg
            .seeds
            .iter()
            .map(|&seed| {
                let batch = batch_for(cfg, seed)?;
                let report = diagnose_batch(cfg, &batch, seed)?;
                Ok(DiagnoseResult { source: "synthetic".into(), seed: Some(seed), report })
            })
            .collect(),
    }
}

pub fn stats(input: &Path, opts: &ReportOptions) -> Result<Report> {
    let set = stats::load(input)?;
    Ok(build_report(&set, opts)?)
}

/// Second-order KL against the Fisher quadratic form at a random state and direction per seed.
pub fn fisher_check(cfg: &ExperimentConfig, scales: &[f64]) -> Result<Vec<FisherResult>> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(CliError::Config("scales must be positive and finite".into()));
    }
    let head = cfg.synth.reference_head();
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || -> Vec<f64> { (0..head.dim()).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let h = draw();
            let v = draw();
            let points: Vec<FisherPoint> = fisher_kl_check(&head, &h, &v, scales)?
                .into_iter()
                .map(|p| FisherPoint { scale: p.scale, kl2: p.kl2, fisher: p.fisher, ratio: p.ratio })
                .collect();
            let deviation_ratios = points.windows(2).map(|w| (w[1].ratio - 1.0).abs() / (w[0].ratio - 1.0).abs()).collect();
            Ok(FisherResult { seed, points, deviation_ratios })
        })
        .collect()
}

/// Writes the synthetic batch of the single configured seed to `out`.
pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<GenResult> {
    let [seed] = cfg.seeds[..] else {
        return Err(CliError::Config("gen writes one batch; pass a single seed".into()));
    };
    let batch = batch_for(cfg, seed)?;
    io::save(&batch, out)?;
    let s = batch.hidden().shape();
    Ok(GenResult {
        seed,
        path: out.to_path_buf(),
        shape: [s[0], s[1], s[2]],
        spans: batch.spans().iter().map(|sp| (sp.lo, sp.hi)).collect(),
        labels: batch.labels().is_some(),
        layers: batch.layers().keys().copied().collect(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "--".into(), |x| format!("{x:.6}"))
}

pub fn diagnostics_text(r: &DiagnosticsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "  anisotropy   {}", opt(r.anisotropy));
    match &r.curvature {
        Some(c) => {
            let _ = writeln!(out, "  curvature    {:.6} rad over {} rows ({} skipped)", c.mean, c.rows, c.skipped);
        }
        None => {
            let _ = writeln!(out, "  curvature    --");
        }
    }
    let _ = writeln!(out, "  grad cosine  {}", opt(r.grad_cosine));
    if let Some(a) = &r.attribution {
        for (name, b) in [("front", a.front), ("middle", a.middle), ("end", a.end)] {
            let _ = writeln!(out, "  bucket {name:<6} {} over {} centres", opt(b.mean), b.count);
        }
    }
    if !r.flags.is_empty() {
        let _ = writeln!(out, "  flags        {}", r.flags.iter().cloned().collect::<Vec<_>>().join(","));
    }
    out
}

pub fn eval_text(rs: &[EvalResult]) -> String {
    let mut out = String::new();
    for r in rs {
        let _ = write!(out, "{} seed {}: value {:.12e} grad_norm {:.6e}", r.loss, r.seed, r.value, r.grad_norm);
        if !r.flags.is_empty() {
            let _ = write!(out, " flags {}", r.flags.join(","));
        }
        out.push('\n');
    }
    out
}

pub fn demo_text(rs: &[DemoResult]) -> String {
    let mut out = String::new();
    for r in rs {
        let _ = writeln!(out, "seed {}: auxiliary reduction {}", r.seed, opt(r.aux_reduction));
        let _ = writeln!(out, "  {:>5}  {:>14}  {:>14}  {:>10}  {:>14}", "step", "lm", "aux", "lambda", "total");
        let last = r.steps.len().saturating_sub(1);
        let stride = (r.steps.len() / 10).max(1);
        for s in r.steps.iter().filter(|s| s.step % stride == 0 || s.step == last) {
            let _ = writeln!(
                out,
                "  {:>5}  {:>14.6e}  {:>14.6e}  {:>10.4e}  {:>14.6e}",
                s.step, s.lm_loss, s.aux_loss, s.lambda, s.total
            );
        }
        out.push_str(&diagnostics_text(&r.diagnostics));
    }
    out
}

pub fn diagnose_text(rs: &[DiagnoseResult]) -> String {
    let mut out = String::new();
    for r in rs {
        match r.seed {
            Some(s) => {
                let _ = writeln!(out, "{} seed {s}", r.source);
            }
            None => {
                let _ = writeln!(out, "{}", r.source);
            }
        }
        out.push_str(&diagnostics_text(&r.report));
    }
    out
}

pub fn fisher_text(rs: &[FisherResult]) -> String {
    let mut out = String::new();
    for r in rs {
        let _ = writeln!(out, "seed {}", r.seed);
        let _ = writeln!(out, "  {:>10}  {:>14}  {:>14}  {:>14}  {:>12}", "scale", "2 KL", "v'Gv", "ratio", "|ratio-1|");
        for p in &r.points {
            let _ = writeln!(
                out,
                "  {:>10.4e}  {:>14.6e}  {:>14.6e}  {:>14.10}  {:>12.4e}",
                p.scale,
                p.kl2,
                p.fisher,
                p.ratio,
                (p.ratio - 1.0).abs()
            );
        }
        let ratios: Vec<String> = r.deviation_ratios.iter().map(|x| format!("{x:.3}")).collect();
        let _ = writeln!(out, "  deviation ratios {}", ratios.join(" "));
    }
    out
}

pub fn gen_text(r: &GenResult) -> String {
    format!(
        "wrote {} (seed {}, shape {}x{}x{}, labels {}, layers {:?})\n",
        r.path.display(),
        r.seed,
        r.shape[0],
        r.shape[1],
        r.shape[2],
        r.labels,
        r.layers
    )
}

pub fn stats_text(r: &Report) -> String {
    render_text(r)
}
