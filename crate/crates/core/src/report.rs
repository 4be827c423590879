//! Rendering Monte Carlo results as CSV, JSON and plain two-column series.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::io::write_atomic;
use crate::sim::MCMetrics;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Plotdata,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// One sweep point: its label, optional x coordinate, and per-method metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub x: Option<f64>,
    pub metrics: Vec<MCMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub study: String,
    /// Name of the sweep variable (`c`, `zero_fraction`, `setting`).
    pub x_label: String,
    pub replicates: usize,
    pub base_seed: u64,
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

const METRIC_NAMES: [&str; 8] = [
    "abs_bias",
    "true_var",
    "mse_tau",
    "mean_est_var",
    "coverage",
    "mse_beta",
    "pct_over_select",
    "pct_under_select",
];

fn metric(m: &MCMetrics, name: &str) -> Option<f64> {
    match name {
        "abs_bias" => m.abs_bias,
        "true_var" => m.true_var,
        "mse_tau" => m.mse_tau,
        "mean_est_var" => m.mean_est_var,
        "coverage" => m.coverage,
        "mse_beta" => m.mse_beta,
        "pct_over_select" => m.pct_over_select,
        "pct_under_select" => m.pct_under_select,
        _ => None,
    }
}

impl Report {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = format!("study,{},method,T,failed,invalid,{}\n", self.x_label, METRIC_NAMES.join(","));
        for row in &self.rows {
            let x = row.x.map(|v| format!("{v}")).unwrap_or_else(|| row.label.clone());
            for m in &row.metrics {
                let vals: Vec<String> = METRIC_NAMES.iter().map(|n| opt(metric(m, n))).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    self.study,
                    x,
                    m.method,
                    m.t,
                    m.failed,
                    m.invalid,
                    vals.join(",")
                ));
            }
        }
        out.into_bytes()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(self).expect("report serializes");
        s.push(b'\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Report, SimError> {
        serde_json::from_slice(bytes).map_err(|e| SimError::Report(e.to_string()))
    }

    /// `(file name, contents)` per available metric and method. Rows without
    /// an x coordinate use their 1-based position.
    pub fn plot_series(&self) -> Vec<(String, Vec<u8>)> {
        let mut methods = Vec::new();
        for row in &self.rows {
            for m in &row.metrics {
                if !methods.contains(&m.method) {
                    methods.push(m.method);
                }
            }
        }
        let mut files = Vec::new();
        for name in METRIC_NAMES {
            for &method in &methods {
                let mut body = String::new();
                for (i, row) in self.rows.iter().enumerate() {
                    let x = row.x.unwrap_or((i + 1) as f64);
                    if let Some(y) = row.metrics.iter().find(|m| m.method == method).and_then(|m| metric(m, name)) {
                        body.push_str(&format!("{x} {y}\n"));
                    }
                }
                if !body.is_empty() {
                    files.push((format!("{name}_{method}.dat"), body.into_bytes()));
                }
            }
        }
        files
    }
}

/// Writes the report in the requested format under `dir`; returns the paths.
pub fn emit_report(report: &Report, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    if report.rows.is_empty() || report.rows.iter().all(|r| r.metrics.is_empty()) {
        return Err(SimError::Report("no metrics to report".into()));
    }
    let files: Vec<(String, Vec<u8>)> = match format {
        ReportFormat::Csv => vec![("report.csv".into(), report.to_csv())],
        ReportFormat::Json => vec![("report.json".into(), report.to_json())],
        ReportFormat::Plotdata => report.plot_series(),
    };
    let mut paths = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes).map_err(|source| SimError::Io {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
