//! JSON documents for fits and subject reports, and plot-ready curve tables.

use std::fmt::Write as _;
use std::path::Path;

use bchmm_core::inference::{FitSummary, StartTrace};
use bchmm_core::metrics::{rar_summary, state_probability_curve, RarSummary, StateProbabilityCurve};
use bchmm_core::Theta;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Result of fitting one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub subject_id: String,
    pub method: Method,
    /// Point estimate: posterior medians or the maximum-likelihood fit.
    pub theta: Theta,
    pub summary: Option<FitSummary>,
    pub loglik: Option<f64>,
    pub traces: Option<Vec<StartTrace>>,
}

/// Everything needed to plot a subject's 24-hour profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub schema_version: u32,
    pub subject_id: String,
    pub method: Method,
    pub theta: Theta,
    pub summary: Option<FitSummary>,
    pub curve: StateProbabilityCurve,
    pub rar: Option<RarSummary>,
    /// Why `rar` is absent.
    pub rar_error: Option<String>,
}

impl SubjectReport {
    pub fn from_fit(doc: &FitDocument) -> Result<Self> {
        let curve = state_probability_curve(&doc.theta)?;
        let (rar, rar_error) = match rar_summary(&curve) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            subject_id: doc.subject_id.clone(),
            method: doc.method,
            theta: doc.theta.clone(),
            summary: doc.summary.clone(),
            curve,
            rar,
            rar_error,
        })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Serialize(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads a document and rejects unknown schema versions.
pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw: serde_json::Value = read_json(path)?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(CliError::Data(format!(
                "{}: unsupported schema_version {other:?}",
                path.display()
            )))
        }
    }
    serde_json::from_value(raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn emit_subject_report(report: &SubjectReport, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn parse_subject_report(path: &Path) -> Result<SubjectReport> {
    read_versioned(path)
}

/// `hour,p1,...,pm` rows of the curve.
pub fn curve_table(curve: &StateProbabilityCurve) -> String {
    let mut s = String::from("hour");
    for j in 0..curve.n_states() {
        let _ = write!(s, ",p{}", j + 1);
    }
    s.push('\n');
    for (t, row) in curve.grid.iter().zip(&curve.probs) {
        s.push_str(&t.to_string());
        for p in row {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    s
}

/// Header of [`rar_row`].
pub const RAR_HEADER: &str = "subject_id,method,rest_amount,gravity_center,rhythmic_index,ri_category,ra_category,negative_ri,error";

pub fn rar_row(report: &SubjectReport) -> String {
    match &report.rar {
        Some(r) => format!(
            "{},{},{},{},{},{},{},{},",
            report.subject_id,
            report.method.label(),
            r.rest_amount,
            r.gravity_center,
            r.rhythmic_index,
            r.ri_category,
            r.ra_category,
            r.negative_ri
        ),
        None => format!(
            "{},{},,,,,,,\"{}\"",
            report.subject_id,
            report.method.label(),
            report.rar_error.as_deref().unwrap_or_default().replace('"', "'")
        ),
    }
}
