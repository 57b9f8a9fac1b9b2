//! Statistics for small-seed experiment grids: cell summaries, Welch tests,
//! Bonferroni and Holm corrections, the single-seed escalation gate and
//! baseline-relative result tables.

pub mod error;
pub mod family;
pub mod ingest;
pub mod report;
pub mod summary;
pub mod ttest;

pub use error::{Result, StatsError};
pub use family::{bonferroni, bonferroni_reject, escalation_gate, holm, Escalation};
pub use ingest::{load, parse_delimited, parse_json, Cell, CellData, ResultSet};
pub use report::{build_report, render_json, render_text, FamilySpec, Report, ReportOptions};
pub use summary::{summarize, summarize_values, CellSeries, CellSummary, Summarize};
pub use ttest::{paired_from_differences, student_t_sf, two_sided_p, welch_df, welch_paired, welch_unpaired, TestKind, TestResult};
