use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stats::{FamilySpec, ReportOptions};
use tubekit_cli::commands::{self, RunRecord};
use tubekit_cli::{CliError, ExperimentConfig, Overrides, Result};

#[derive(Parser)]
#[command(name = "tubekit", version, about = "Auxiliary trajectory losses: evaluation, toy descent, diagnostics and statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct Common {
    /// Output format.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write the output here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit creation time and wall time from the output.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct Experiment {
    /// Config file: TOML-style sections, or JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss identifier or cell name.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Curvature knob of the synthetic batch, in [0, 1].
    #[arg(long)]
    curvature: Option<f64>,
    /// Stencil scales for the multi-scale losses, comma-separated.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
}

impl Experiment {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let o = Overrides {
            loss: self.loss.clone(),
            seed: self.seed,
            seeds: self.seeds.clone(),
            steps: self.steps,
            lambda0: self.lambda0,
            lr: self.lr,
            curvature: self.curvature,
            scales: self.scales.clone(),
        };
        ExperimentConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one loss on a synthetic batch per seed.
    Eval {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient descent on states and auxiliary heads against LM + lambda(t) * aux.
    TrainDemo {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Anisotropy, curvature, gradient cosine and bucket attribution.
    Diagnose {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        common: Common,
        /// Saved batch (.bin/.txt) or train-demo record (.json); synthetic when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-cell summaries, Welch tests against a baseline and family verdicts.
    Stats {
        /// Results file: delimited text or JSON.
        input: PathBuf,
        #[arg(long, default_value = "regular")]
        baseline: String,
        #[arg(long, default_value_t = 0.10)]
        alpha: f64,
        /// `all`, `name=v1,v2,...` or `v1,v2,...`; repeatable.
        #[arg(long)]
        family: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare 2 KL against the Fisher quadratic form at shrinking scales.
    FisherCheck {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25,0.125,0.0625")]
        kl_scales: Vec<f64>,
    },
    /// Write a synthetic batch to a file (.bin binary, otherwise text).
    Gen {
        #[command(flatten)]
        exp: Experiment,
        /// Destination batch file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn emit<T: Serialize>(
    common: &Common,
    command: &str,
    config: serde_json::Value,
    results: T,
    text: impl FnOnce(&T) -> String,
    start: Instant,
) -> Result<()> {
    let body = match common.format {
        Format::Text => {
            let mut s = text(&results);
            if !common.no_timestamp {
                s.push_str(&format!("wall time {:.3} s\n", start.elapsed().as_secs_f64()));
            }
            s
        }
        Format::Json => {
            let mut rec = RunRecord::new(command, config, results);
            if !common.no_timestamp {
                rec.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
                rec.wall_time_s = Some(start.elapsed().as_secs_f64());
            }
            serde_json::to_string_pretty(&rec)? + "\n"
        }
    };
    match &common.out {
        Some(p) => std::fs::write(p, body)?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Eval { exp, common } => {
            let cfg = exp.resolve()?;
            let res = commands::eval(&cfg)?;
            emit(&common, "eval", cfg.echo()?, res, |r| commands::eval_text(r), start)
        }
        Command::TrainDemo { exp, common } => {
            let cfg = exp.resolve()?;
            let res = commands::train(&cfg).inspect_err(|e| {
                if let CliError::Kit(tubekit::KitError::Divergence(_)) = e {
                    if let Ok(echo) = cfg.echo() {
                        eprintln!("configuration at divergence:\n{}", serde_json::to_string_pretty(&echo).unwrap_or_default());
                    }
                }
            })?;
            emit(&common, "train-demo", cfg.echo()?, res, |r| commands::demo_text(r), start)
        }
        Command::Diagnose { exp, common, input } => {
            let cfg = exp.resolve()?;
            let res = commands::diagnose(&cfg, input.as_deref())?;
            emit(&common, "diagnose", cfg.echo()?, res, |r| commands::diagnose_text(r), start)
        }
        Command::Stats { input, baseline, alpha, family, common } => {
            let families = family.iter().map(|f| f.parse::<FamilySpec>()).collect::<stats::Result<Vec<_>>>()?;
            let opts = ReportOptions { baseline, alpha, families };
            let res = commands::stats(&input, &opts)?;
            let mut echo = serde_json::to_value(&opts)?;
            echo["input"] = serde_json::Value::String(input.display().to_string());
            emit(&common, "stats", echo, res, commands::stats_text, start)
        }
        Command::FisherCheck { exp, common, kl_scales } => {
            let cfg = exp.resolve()?;
            let res = commands::fisher_check(&cfg, &kl_scales)?;
            emit(&common, "fisher-check", cfg.echo()?, res, |r| commands::fisher_text(r), start)
        }
        Command::Gen { exp, out, format } => {
            let cfg = exp.resolve()?;
            let res = commands::gen(&cfg, &out)?;
            let common = Common { format, out: None, no_timestamp: true };
            emit(&common, "gen", cfg.echo()?, res, commands::gen_text, start)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
