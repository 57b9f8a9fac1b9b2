//! Baseline-relative result tables with family-wise verdicts.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StatsError};
use crate::family::{bonferroni, holm, escalation_gate, Escalation};
use crate::ingest::{Cell, ResultSet};
use crate::summary::CellSummary;
use crate::ttest::{welch_paired, welch_unpaired, TestKind, TestResult};

/// Cells interpreted jointly under one family-wise correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilySpec {
    /// Every non-baseline cell of a benchmark.
    All,
    Named { name: String, variants: Vec<String> },
}

impl FamilySpec {
    pub fn name(&self) -> &str {
        match self {
            FamilySpec::All => "all",
            FamilySpec::Named { name, .. } => name,
        }
    }
}

impl FromStr for FamilySpec {
    type Err = StatsError;

    /// `all`, `name=v1,v2,...` or `v1,v2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(FamilySpec::All);
        }
        let (name, list) = match s.split_once('=') {
            Some((n, l)) => (n.trim().to_string(), l),
            None => ("family".to_string(), s),
        };
        let variants: Vec<String> = list.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if name.is_empty() || variants.is_empty() {
            return Err(StatsError::Invalid(format!("malformed family `{s}`")));
        }
        Ok(FamilySpec::Named { name, variants })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub baseline: String,
    /// Single-cell threshold and family-wise error rate.
    pub alpha: f64,
    pub families: Vec<FamilySpec>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { baseline: "regular".into(), alpha: 0.10, families: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub baseline: bool,
    pub n: usize,
    pub exact: CellSummary,
    pub prefix: Option<CellSummary>,
    /// Exact-match mean minus the baseline mean.
    pub delta: Option<f64>,
    pub p_unp: Option<f64>,
    pub p_paired: Option<f64>,
    pub unpaired: Option<TestResult>,
    pub paired: Option<TestResult>,
    pub escalation: Escalation,
    pub flags: Vec<String>,
}

impl ReportRow {
    /// The p-value a family correction uses: paired when available, else unpaired.
    pub fn family_p(&self) -> Option<(f64, TestKind)> {
        self.p_paired.map(|p| (p, TestKind::Paired)).or(self.p_unp.map(|p| (p, TestKind::Unpaired)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub variant: String,
    pub p: f64,
    pub test: TestKind,
    pub bonferroni_reject: bool,
    pub holm_reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub variant: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyVerdict {
    pub name: String,
    pub alpha: f64,
    pub k: usize,
    /// `alpha / k`; absent for an empty family.
    pub bonferroni_threshold: Option<f64>,
    pub members: Vec<FamilyMember>,
    pub excluded: Vec<Excluded>,
    /// Cells rejected by Holm (a superset of the Bonferroni rejections).
    pub survivors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: String,
    pub baseline: String,
    pub rows: Vec<ReportRow>,
    pub families: Vec<FamilyVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub alpha: f64,
    pub benchmarks: Vec<BenchmarkReport>,
}

fn row_for(cell: &Cell, base: &Cell, is_baseline: bool) -> Result<ReportRow> {
    let exact = cell.exact.summary()?;
    let prefix = cell.prefix.as_ref().map(|p| p.summary()).transpose()?;
    let n = exact.n;
    let escalation = escalation_gate(n);
    let mut flags = Vec::new();
    let mut row = ReportRow {
        variant: cell.variant.clone(),
        baseline: is_baseline,
        n,
        exact,
        prefix,
        delta: None,
        p_unp: None,
        p_paired: None,
        unpaired: None,
        paired: None,
        escalation,
        flags: Vec::new(),
    };
    if is_baseline {
        flags.push("baseline".to_string());
        row.flags = flags;
        return Ok(row);
    }
    let base_exact = base.exact.summary()?;
    row.delta = Some(exact.mean - base_exact.mean);
    if escalation != Escalation::Testable {
        flags.push(escalation.label().to_string());
        row.flags = flags;
        return Ok(row);
    }
    if base_exact.n >= 2 {
        row.unpaired = Some(welch_unpaired(&exact, &base_exact)?);
    }
    if let (Some(x), Some(y)) = (cell.exact.series(), base.exact.series()) {
        let shared = x.seeds.iter().filter(|s| y.value_of(s).is_some()).count();
        if shared >= 2 {
            if shared < x.len() || shared < y.len() {
                flags.push("partial-pairing".to_string());
            }
            row.paired = Some(welch_paired(x, y)?);
        }
    }
    row.p_unp = row.unpaired.map(|t| t.p);
    row.p_paired = row.paired.map(|t| t.p);
    if row.p_unp.is_none() && cell.reported_p_unp.is_some() || row.p_paired.is_none() && cell.reported_p_paired.is_some() {
        flags.push("reported-p".to_string());
    }
    row.p_unp = row.p_unp.or(cell.reported_p_unp);
    row.p_paired = row.p_paired.or(cell.reported_p_paired);
    if row.unpaired.iter().chain(&row.paired).any(|t| t.degenerate) {
        flags.push("degenerate".to_string());
    }
    row.flags = flags;
    Ok(row)
}

fn family_verdict(spec: &FamilySpec, rows: &[ReportRow], alpha: f64) -> Result<FamilyVerdict> {
    let wanted: Vec<String> = match spec {
        FamilySpec::All => rows.iter().filter(|r| !r.baseline).map(|r| r.variant.clone()).collect(),
        FamilySpec::Named { variants, .. } => variants.clone(),
    };
    let mut candidates: Vec<(String, f64, TestKind)> = Vec::new();
    let mut excluded = Vec::new();
    for v in wanted {
        let exclude = |reason: &str| Excluded { variant: v.clone(), reason: reason.to_string() };
        match rows.iter().find(|r| r.variant == v) {
            None => excluded.push(exclude("missing")),
            Some(r) if r.baseline => excluded.push(exclude("baseline")),
            Some(r) if r.escalation != Escalation::Testable => excluded.push(exclude(r.escalation.label())),
            Some(r) => match r.family_p() {
                Some((p, kind)) => candidates.push((v.clone(), p, kind)),
                None => excluded.push(exclude("no p-value")),
            },
        }
    }
    let p: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let k = p.len();
    let threshold = if k > 0 { Some(bonferroni(alpha, k)?) } else { None };
    let holm_rej = holm(&p, alpha)?;
    let members: Vec<FamilyMember> = candidates
        .into_iter()
        .zip(holm_rej)
        .map(|((variant, p, test), h)| FamilyMember {
            variant,
            p,
            test,
            bonferroni_reject: threshold.is_some_and(|t| p < t),
            holm_reject: h,
        })
        .collect();
    let survivors = members.iter().filter(|m| m.holm_reject).map(|m| m.variant.clone()).collect();
    Ok(FamilyVerdict {
        name: spec.name().to_string(),
        alpha,
        k,
        bonferroni_threshold: threshold,
        members,
        excluded,
        survivors,
    })
}

/// Per-benchmark rows against the baseline plus one verdict per family.
pub fn build_report(set: &ResultSet, opts: &ReportOptions) -> Result<Report> {
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(StatsError::Invalid(format!("alpha must lie in (0, 1], got {}", opts.alpha)));
    }
    if set.cells.is_empty() {
        return Err(StatsError::Insufficient("no result cells".into()));
    }
    let mut benchmarks = Vec::new();
    for bench in set.benchmarks() {
        let base = set.cell(bench, &opts.baseline).ok_or_else(|| StatsError::MissingBaseline {
            benchmark: bench.to_string(),
            baseline: opts.baseline.clone(),
        })?;
        let mut rows = vec![row_for(base, base, true)?];
        for cell in set.cells.iter().filter(|c| c.benchmark == bench && c.variant != opts.baseline) {
            rows.push(row_for(cell, base, false)?);
        }
        let families = opts.families.iter().map(|f| family_verdict(f, &rows, opts.alpha)).collect::<Result<_>>()?;
        benchmarks.push(BenchmarkReport {
            benchmark: bench.to_string(),
            baseline: opts.baseline.clone(),
            rows,
            families,
        });
    }
    Ok(Report { alpha: opts.alpha, benchmarks })
}

fn fmt_cell(s: Option<&CellSummary>) -> String {
    match s {
        None => "--".into(),
        Some(s) => match s.sd {
            Some(sd) => format!("{:.2} ± {:.2}", s.mean, sd),
            None => format!("{:.2} (n=1)", s.mean),
        },
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        None => "--".into(),
        Some(p) if p < 0.001 => "<0.001".into(),
        Some(p) => format!("{p:.3}"),
    }
}

fn fmt_delta(d: Option<f64>) -> String {
    d.map_or_else(|| "--".into(), |d| format!("{d:+.2}"))
}

/// Aligned plain-text table.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    for (bi, b) in report.benchmarks.iter().enumerate() {
        if bi > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "benchmark {} (baseline {}, alpha {})", b.benchmark, b.baseline, report.alpha);
        let header = ["variant", "exact %", "prefix %", "delta", "p_unp", "p_paired", "flags"];
        let cells: Vec<[String; 7]> = b
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    fmt_cell(Some(&r.exact)),
                    fmt_cell(r.prefix.as_ref()),
                    fmt_delta(r.delta),
                    fmt_p(r.p_unp),
                    fmt_p(r.p_paired),
                    r.flags.join(","),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for c in &cells {
            for (w, s) in width.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |fields: &[String]| {
            let mut l = String::new();
            for (i, (f, w)) in fields.iter().zip(width).enumerate() {
                if i + 1 == fields.len() {
                    l.push_str(f);
                } else {
                    let pad = w - f.chars().count();
                    l.push_str(f);
                    l.push_str(&" ".repeat(pad + 2));
                }
            }
            l.trim_end().to_string()
        };
        let _ = writeln!(out, "{}", line(&header.map(String::from)));
        for c in &cells {
            let _ = writeln!(out, "{}", line(c));
        }
        for f in &b.families {
            let thr = f.bonferroni_threshold.map_or_else(|| "--".into(), |t| format!("{t}"));
            let verdict = if f.survivors.is_empty() {
                "no cell survives".to_string()
            } else {
                format!("survivors: {}", f.survivors.join(", "))
            };
            let _ = writeln!(out, "family {} (k = {}, Bonferroni threshold {}): {}", f.name, f.k, thr, verdict);
            for m in &f.members {
                let test = match m.test {
                    TestKind::Paired => "paired",
                    TestKind::Unpaired => "unpaired",
                };
                let _ = writeln!(
                    out,
                    "  {} p = {} ({test}) bonferroni {} holm {}",
                    m.variant,
                    fmt_p(Some(m.p)),
                    if m.bonferroni_reject { "reject" } else { "keep" },
                    if m.holm_reject { "reject" } else { "keep" },
                );
            }
            for e in &f.excluded {
                let _ = writeln!(out, "  {} excluded ({})", e.variant, e.reason);
            }
        }
    }
    out
}

pub fn render_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}
