//! Where daily observations come from and where run reports go.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use chrono::NaiveDate;
use mandi_core::data::{parse_observations, ObservationRow};

use crate::error::{Result, ServiceError};
use crate::records::RunReport;

pub trait Source: Send + Sync {
    fn name(&self) -> &str;
    /// Observations published for `date`.
    fn fetch(&self, date: NaiveDate) -> Result<Vec<ObservationRow>>;
}

/// Reads `{dir}/{YYYY-MM-DD}.csv` in the ingestion format.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    pub dir: PathBuf,
}

impl DirectorySource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Source for DirectorySource {
    fn name(&self) -> &str {
        self.dir.to_str().unwrap_or("directory")
    }

    fn fetch(&self, date: NaiveDate) -> Result<Vec<ObservationRow>> {
        let path = self.dir.join(format!("{}.csv", date.format("%Y-%m-%d")));
        let failed = |message: String| ServiceError::Source {
            source_name: self.name().to_string(),
            date,
            message,
        };
        let file = std::fs::File::open(&path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        parse_observations(file).map_err(|e| failed(format!("{}: {e}", path.display())))
    }
}

pub trait ReportSink: Send + Sync {
    fn emit(&self, report: &RunReport) -> Result<()>;
}

/// Appends each report as one JSON line.
#[derive(Debug, Clone)]
pub struct FileSink {
    pub path: PathBuf,
}

impl ReportSink for FileSink {
    fn emit(&self, report: &RunReport) -> Result<()> {
        let mut line = serde_json::to_string(report).map_err(|e| ServiceError::json(&self.path, e))?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| ServiceError::io(&self.path, e))
    }
}

/// Emits the report through `tracing`, one event per stage plus a summary.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogSink;

impl ReportSink for LogSink {
    fn emit(&self, report: &RunReport) -> Result<()> {
        for s in &report.stages {
            tracing::info!(
                stage = s.stage.as_str(),
                status = ?s.status,
                seconds = s.seconds,
                error = s.error.as_deref().unwrap_or(""),
                "stage"
            );
        }
        tracing::info!(
            run_date = %report.run_date,
            attempt = report.attempt,
            rows_acquired = report.rows_acquired,
            outliers_removed = report.outliers_removed,
            forecasts_written = report.forecasts_written,
            published = report.published,
            "run report"
        );
        Ok(())
    }
}
