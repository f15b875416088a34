//! Persisted records: forecasts, published snapshots, model artifacts and
//! run reports.

use chrono::{DateTime, Duration, NaiveDate, Utc};
use mandi_core::kernel::{EvidenceEntry, Interval};
use mandi_core::model::ForestModel;
use mandi_core::panel::Direction;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub down: f64,
    pub flat: f64,
    pub up: f64,
}

impl From<[f64; 3]> for Posterior {
    fn from(p: [f64; 3]) -> Self {
        Self {
            down: p[0],
            flat: p[1],
            up: p[2],
        }
    }
}

impl Posterior {
    pub fn sum(&self) -> f64 {
        self.down + self.flat + self.up
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub generated_at: DateTime<Utc>,
    pub market_id: String,
    pub produce: String,
    pub q: usize,
    pub direction: Direction,
    pub posterior: Posterior,
    /// RFNN estimate, Rs per 100 kg.
    pub predicted_price: f64,
    pub interval: Interval,
    /// Highest-weight neighbors first.
    pub evidence: Vec<EvidenceEntry>,
    /// 0 for a model fitted on the fly because none was registered.
    pub model_version: u64,
}

/// Raw and imputed daily prices for one (market, produce) over the run window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySeries {
    pub market_id: String,
    pub produce: String,
    pub start_date: NaiveDate,
    pub raw: Vec<Option<f64>>,
    pub imputed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub date: NaiveDate,
    pub raw: Option<f64>,
    pub imputed: f64,
}

impl HistorySeries {
    /// The last `days` points, oldest first.
    pub fn tail(&self, days: usize) -> Vec<HistoryPoint> {
        let from = self.imputed.len().saturating_sub(days);
        (from..self.imputed.len())
            .map(|t| HistoryPoint {
                date: self.start_date + Duration::days(t as i64),
                raw: self.raw[t],
                imputed: self.imputed[t],
            })
            .collect()
    }
}

/// Everything readers see for one completed daily run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub as_of_date: NaiveDate,
    pub generated_at: DateTime<Utc>,
    pub produce: Vec<String>,
    /// Sorted by (market_id, produce, q).
    pub forecasts: Vec<ForecastRecord>,
    pub history: Vec<HistorySeries>,
}

impl Snapshot {
    pub fn forecasts_for(&self, market_id: &str, produce: &str) -> Vec<&ForecastRecord> {
        self.forecasts
            .iter()
            .filter(|f| f.market_id == market_id && f.produce == produce)
            .collect()
    }

    pub fn history_for(&self, market_id: &str, produce: &str) -> Option<&HistorySeries> {
        self.history
            .iter()
            .find(|h| h.market_id == market_id && h.produce == produce)
    }
}

/// A trained forest for one (produce, market, q) plus what is needed to
/// rebuild its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub produce: String,
    pub market_id: String,
    pub q: usize,
    pub version: u64,
    pub tau: usize,
    pub k: usize,
    pub max_rank: usize,
    /// Calibrated number of neighbors for top-`l` intervals.
    pub l: usize,
    pub calibration_coverage: f64,
    /// Set when no `l` reached the target coverage.
    pub calibration_flagged: bool,
    pub trained_through: NaiveDate,
    pub forest: ForestModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Acquire,
    Clean,
    Predict,
    Archive,
    Check,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Acquire,
        Stage::Clean,
        Stage::Predict,
        Stage::Archive,
        Stage::Check,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Acquire => "acquire",
            Stage::Clean => "clean",
            Stage::Predict => "predict",
            Stage::Archive => "archive",
            Stage::Check => "check",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_date: NaiveDate,
    /// 1 for the first run of `run_date`, then 2, 3, ...
    pub attempt: u32,
    pub started_at: DateTime<Utc>,
    /// Always the six stages in pipeline order.
    pub stages: Vec<StageReport>,
    pub rows_acquired: usize,
    pub outliers_removed: usize,
    pub forecasts_written: usize,
    /// (market, produce, q) combinations skipped for lack of history.
    pub insufficient_history: usize,
    pub snapshot_id: Option<String>,
    pub published: bool,
}

impl RunReport {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.status)
            .unwrap_or(StageStatus::Skipped)
    }

    pub fn statuses(&self) -> Vec<StageStatus> {
        self.stages.iter().map(|s| s.status).collect()
    }

    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }
}
