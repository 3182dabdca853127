//! Tabular (CSV) and nested (JSON) encodings of verification reports.
//!
//! Both encodings are byte-for-byte deterministic for a given list of
//! reports: rows are sorted by `(check, V, β, μ, λ)`, payload keys are
//! sorted, and floats use the shortest round-trip representation.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verify::VerificationReport;

/// Version of the row column layout.
pub const COLUMNS_VERSION: u32 = 1;

/// Fixed leading columns of the row format; payload columns follow.
pub const FIXED_COLUMNS: [&str; 14] = [
    "check",
    "volume",
    "beta",
    "mu",
    "lambda",
    "raw_gap",
    "budget",
    "verdict",
    "quad_residual",
    "coherent_tail",
    "cap_tail",
    "fd_step",
    "inputs_hash",
    "message",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub columns_version: u32,
    pub reports: Vec<VerificationReport>,
}

fn order(a: &VerificationReport, b: &VerificationReport) -> Ordering {
    a.check
        .cmp(&b.check)
        .then(a.point.volume.total_cmp(&b.point.volume))
        .then(a.point.beta.total_cmp(&b.point.beta))
        .then(a.point.mu.total_cmp(&b.point.mu))
        .then(a.point.lambda.total_cmp(&b.point.lambda))
}

/// Stable sort by `(check, V, β, μ, λ)`.
pub fn sort_reports(reports: &mut [VerificationReport]) {
    reports.sort_by(order);
}

/// Header of the row format for `reports`.
pub fn columns(reports: &[VerificationReport]) -> Vec<String> {
    let payload: BTreeSet<&String> = reports.iter().flat_map(|r| r.payload.keys()).collect();
    FIXED_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain(payload.into_iter().map(|k| format!("payload.{k}")))
        .collect()
}

pub fn to_rows(reports: &[VerificationReport]) -> Result<String> {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let header = columns(&sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for r in &sorted {
        let mut row = vec![
            r.check.clone(),
            r.point.volume.to_string(),
            r.point.beta.to_string(),
            r.point.mu.to_string(),
            r.point.lambda.to_string(),
            r.raw_gap.to_string(),
            r.budget.total.to_string(),
            r.verdict.to_string(),
            r.budget.quad_residual.to_string(),
            r.budget.coherent_tail.to_string(),
            r.budget.cap_tail.to_string(),
            r.budget.fd_step.to_string(),
            r.inputs_hash.clone(),
            r.message.clone().unwrap_or_default(),
        ];
        for key in &header[FIXED_COLUMNS.len()..] {
            let k = &key["payload.".len()..];
            row.push(r.payload.get(k).map(f64::to_string).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv encoding: {e}"))
}

pub fn to_document(reports: &[VerificationReport]) -> Result<String> {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let doc = ReportDocument {
        columns_version: COLUMNS_VERSION,
        reports: sorted,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_document(text: &str) -> Result<ReportDocument> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("report document: {e}")))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}
