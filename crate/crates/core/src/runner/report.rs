use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::feature_store::{Category, TokenType};
use crate::metrics::{BalancedMetrics, CategoryAggregate, Metric, TrialSummary};
use crate::templates::Rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellResult {
    /// Hyperplane template scored on the full test split.
    Metrics(BalancedMetrics),
    /// Cosine templates over few-shot trials.
    Trials(TrialSummary),
}

impl CellResult {
    /// (mean, std) of one metric; hyperplane cells have no std.
    pub fn value(&self, metric: Metric) -> (Option<f64>, Option<f64>) {
        match self {
            CellResult::Metrics(m) => (m.get(metric), None),
            CellResult::Trials(t) => {
                let s = t.get(metric);
                (s.mean, s.std)
            }
        }
    }

    pub fn means(&self) -> [Option<f64>; 4] {
        match self {
            CellResult::Metrics(m) => m.values(),
            CellResult::Trials(t) => t.means(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model_tag: String,
    pub token_type: TokenType,
    pub concept: u32,
    pub concept_name: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub model_tag: String,
    pub token_type: TokenType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub category: Category,
    pub aggregate: CategoryAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub model_tag: String,
    pub token_type: TokenType,
    pub concept: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub engine_version: String,
    /// Wall-clock time of the run; the only field that differs between reruns.
    pub generated_at: Option<String>,
    pub config: ExperimentConfig,
    pub cells: Vec<ReportCell>,
    pub categories: Vec<CategoryRow>,
    pub skipped: Vec<SkippedCell>,
}

impl ExperimentReport {
    pub fn without_timestamp(&self) -> Self {
        Self {
            generated_at: None,
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (model, token type, concept, k, metric). The k column is
    /// present only for cosine runs; undefined values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let with_k = self.config.rule == Rule::Cosine;
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: &[&str] = if with_k {
            &["model_tag", "token_type", "concept", "k", "metric", "mean", "std"]
        } else {
            &["model_tag", "token_type", "concept", "metric", "mean", "std"]
        };
        w.write_record(header).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for cell in &self.cells {
            for metric in Metric::ALL {
                let (mean, std) = cell.result.value(metric);
                let mut row = vec![
                    cell.model_tag.clone(),
                    cell.token_type.to_string(),
                    cell.concept.to_string(),
                ];
                if with_k {
                    row.push(cell.k.map(|k| k.to_string()).unwrap_or_default());
                }
                row.extend([metric.to_string(), fmt(mean), fmt(std)]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Malformed(format!("csv: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Write the report into `dir` as `report.json` or `report.csv`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (name, body) = match format {
        ReportFormat::Json => (REPORT_JSON, report.to_json()?),
        ReportFormat::Csv => (REPORT_CSV, report.to_csv()?),
    };
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
