//! Per-seed and per-cell results as delimiter-separated text or JSON.
//!
//! Per-seed rows carry `benchmark, variant, seed, exact_pp[, prefix_pp]`.
//! Summary rows carry `benchmark, variant, exact_mean, exact_sd, n` and optionally
//! `prefix_mean, prefix_sd, p_unp, p_paired` for transcribed tables.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Result, StatsError};
use crate::summary::{CellSeries, CellSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub benchmark: String,
    pub variant: String,
    #[serde(deserialize_with = "label")]
    pub seed: String,
    pub exact_pp: f64,
    #[serde(default, deserialize_with = "opt_number")]
    pub prefix_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub benchmark: String,
    pub variant: String,
    pub exact_mean: f64,
    #[serde(default, deserialize_with = "opt_number")]
    pub exact_sd: Option<f64>,
    #[serde(default, deserialize_with = "opt_number")]
    pub prefix_mean: Option<f64>,
    #[serde(default, deserialize_with = "opt_number")]
    pub prefix_sd: Option<f64>,
    pub n: usize,
    #[serde(default, deserialize_with = "opt_number")]
    pub p_unp: Option<f64>,
    #[serde(default, deserialize_with = "opt_number")]
    pub p_paired: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

fn label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Label {
        Int(i64),
        Text(String),
    }
    Ok(match Label::deserialize(d)? {
        Label::Int(i) => i.to_string(),
        Label::Text(s) => s,
    })
}

/// Numbers with `""`, `-`, `--` and `null` read as missing.
fn opt_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    match Option::<NumOrText>::deserialize(d)? {
        None => Ok(None),
        Some(NumOrText::Num(v)) => Ok(Some(v)),
        Some(NumOrText::Text(s)) => match s.trim() {
            "" | "-" | "--" => Ok(None),
            t => t.parse().map(Some).map_err(serde::de::Error::custom),
        },
    }
}

/// Observations of one metric in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellData {
    Series(CellSeries),
    Summary(CellSummary),
}

impl CellData {
    pub fn summary(&self) -> Result<CellSummary> {
        match self {
            CellData::Series(s) => crate::summary::summarize(s),
            CellData::Summary(s) => Ok(*s),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            CellData::Series(s) => s.len(),
            CellData::Summary(s) => s.n,
        }
    }

    pub fn series(&self) -> Option<&CellSeries> {
        match self {
            CellData::Series(s) => Some(s),
            CellData::Summary(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub benchmark: String,
    pub variant: String,
    pub exact: CellData,
    pub prefix: Option<CellData>,
    /// p-values transcribed alongside a summary, used when they cannot be recomputed.
    pub reported_p_unp: Option<f64>,
    pub reported_p_paired: Option<f64>,
}

/// Cells in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub cells: Vec<Cell>,
}

impl ResultSet {
    pub fn benchmarks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.benchmark.as_str()) {
                out.push(&c.benchmark);
            }
        }
        out
    }

    pub fn cell(&self, benchmark: &str, variant: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.benchmark == benchmark && c.variant == variant)
    }

    pub fn from_seed_rows(rows: &[SeedRow]) -> Result<Self> {
        let mut groups: Vec<(String, String, Vec<&SeedRow>)> = Vec::new();
        for r in rows {
            match groups.iter_mut().find(|g| g.0 == r.benchmark && g.1 == r.variant) {
                Some(g) => g.2.push(r),
                None => groups.push((r.benchmark.clone(), r.variant.clone(), vec![r])),
            }
        }
        let mut cells = Vec::with_capacity(groups.len());
        for (benchmark, variant, rs) in groups {
            let seeds: Vec<String> = rs.iter().map(|r| r.seed.clone()).collect();
            let exact = CellSeries::new(&benchmark, &variant, seeds.clone(), rs.iter().map(|r| r.exact_pp).collect())?;
            let with_prefix = rs.iter().filter(|r| r.prefix_pp.is_some()).count();
            let prefix = if with_prefix == 0 {
                None
            } else if with_prefix == rs.len() {
                let vals = rs.iter().map(|r| r.prefix_pp.unwrap_or_default()).collect();
                Some(CellData::Series(CellSeries::new(&benchmark, &variant, seeds, vals)?))
            } else {
                return Err(StatsError::Parse(format!("`{benchmark}/{variant}`: prefix_pp given for some seeds only")));
            };
            cells.push(Cell {
                benchmark,
                variant,
                exact: CellData::Series(exact),
                prefix,
                reported_p_unp: None,
                reported_p_paired: None,
            });
        }
        Ok(Self { cells })
    }

    pub fn from_summary_rows(rows: &[SummaryRow]) -> Result<Self> {
        let mut cells: Vec<Cell> = Vec::with_capacity(rows.len());
        for r in rows {
            if cells.iter().any(|c| c.benchmark == r.benchmark && c.variant == r.variant) {
                return Err(StatsError::Parse(format!("`{}/{}` summarized twice", r.benchmark, r.variant)));
            }
            let exact = CellSummary::new(r.exact_mean, r.exact_sd, r.n)?;
            if r.n >= 2 && r.exact_sd.is_none() {
                return Err(StatsError::Parse(format!("`{}/{}`: exact_sd missing with n = {}", r.benchmark, r.variant, r.n)));
            }
            let prefix = match r.prefix_mean {
                Some(m) => Some(CellData::Summary(CellSummary::new(m, r.prefix_sd, r.n)?)),
                None => None,
            };
            for p in [r.p_unp, r.p_paired].into_iter().flatten() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(StatsError::Parse(format!("`{}/{}`: p-value {p} outside [0, 1]", r.benchmark, r.variant)));
                }
            }
            cells.push(Cell {
                benchmark: r.benchmark.clone(),
                variant: r.variant.clone(),
                exact: CellData::Summary(exact),
                prefix,
                reported_p_unp: r.p_unp,
                reported_p_paired: r.p_paired,
            });
        }
        Ok(Self { cells })
    }
}

fn header_line(text: &str) -> Option<&str> {
    text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Parses comma- or tab-separated results; the header decides between per-seed and summary rows.
pub fn parse_delimited(text: &str) -> Result<ResultSet> {
    let header = header_line(text).ok_or_else(|| StatsError::Parse("no header line".into()))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let columns: Vec<&str> = header.split(delimiter as char).map(str::trim).collect();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    if columns.contains(&"seed") {
        let rows = reader.deserialize().collect::<std::result::Result<Vec<SeedRow>, _>>()?;
        ResultSet::from_seed_rows(&rows)
    } else if columns.contains(&"exact_mean") {
        let rows = reader.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
        ResultSet::from_summary_rows(&rows)
    } else {
        Err(StatsError::Parse("header names neither `seed` nor `exact_mean`".into()))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonRow {
    Seed(SeedRow),
    Summary(SummaryRow),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonDoc {
    Rows(Vec<JsonRow>),
    Wrapped { rows: Vec<JsonRow> },
}

/// Parses a JSON array of per-seed or summary rows, bare or under a `rows` key.
pub fn parse_json(text: &str) -> Result<ResultSet> {
    let rows = match serde_json::from_str::<JsonDoc>(text)? {
        JsonDoc::Rows(r) | JsonDoc::Wrapped { rows: r } => r,
    };
    let mut seeds = Vec::new();
    let mut summaries = Vec::new();
    for r in rows {
        match r {
            JsonRow::Seed(s) => seeds.push(s),
            JsonRow::Summary(s) => summaries.push(s),
        }
    }
    let mut set = ResultSet::from_seed_rows(&seeds)?;
    for c in ResultSet::from_summary_rows(&summaries)?.cells {
        if set.cell(&c.benchmark, &c.variant).is_some() {
            return Err(StatsError::Parse(format!("`{}/{}` given as both seeds and summary", c.benchmark, c.variant)));
        }
        set.cells.push(c);
    }
    Ok(set)
}

/// Reads a results file; `.json` is parsed as JSON, anything else as delimited text.
pub fn load(path: &Path) -> Result<ResultSet> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_json(&text)
    } else {
        parse_delimited(&text)
    }
}
