//! HTTP + JSON API under `/api/v1`.
//!
//! Read handlers take one `Arc<Snapshot>` from the store and answer from it
//! alone, so a publish during a request never mixes two runs.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration as StdDuration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use mandi_core::data::MarketRecord;
use mandi_core::kernel::EvidenceEntry;
use mandi_core::panel::Direction;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::pipeline::{run_daily, PipelineConfig};
use crate::records::{ForecastRecord, HistoryPoint, Posterior, RunReport, Snapshot};
use crate::source::{ReportSink, Source};
use crate::store::FileStore;

/// What `POST /admin/run` needs to start a daily run.
pub struct AdminRunner {
    pub sources: Vec<Box<dyn Source>>,
    pub sink: Box<dyn ReportSink>,
    pub config: PipelineConfig,
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<FileStore>,
    /// `None` disables the admin endpoint.
    pub admin_token: Option<String>,
    pub runner: Option<Arc<AdminRunner>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": ErrorBody { code: self.code.into(), message: self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPayload {
    pub lower: f64,
    pub upper: f64,
    pub method: String,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPayload {
    pub q: usize,
    pub direction: Direction,
    pub posterior: Posterior,
    pub predicted_price_rs_per_quintal: f64,
    pub interval: IntervalPayload,
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPayload {
    pub generated_at: DateTime<Utc>,
    /// Ascending by `q`.
    pub horizons: Vec<HorizonPayload>,
}

/// Wire form of a (market, produce) forecast set. Expects a nonempty slice.
pub fn forecast_payload(records: &[&ForecastRecord]) -> ForecastPayload {
    let mut horizons: Vec<HorizonPayload> = records
        .iter()
        .map(|r| HorizonPayload {
            q: r.q,
            direction: r.direction,
            posterior: r.posterior,
            predicted_price_rs_per_quintal: r.predicted_price,
            interval: IntervalPayload {
                lower: r.interval.lower,
                upper: r.interval.upper,
                method: r.interval.method.name().to_string(),
                param: r.interval.method.param(),
            },
            model_version: r.model_version,
        })
        .collect();
    horizons.sort_by_key(|h| h.q);
    ForecastPayload {
        generated_at: records[0].generated_at,
        horizons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPayload {
    pub market_id: String,
    pub produce: String,
    pub points: Vec<HistoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub last_run_date: Option<NaiveDate>,
    pub last_run_ok: Option<bool>,
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/markets", get(markets))
        .route("/produce", get(produce))
        .route("/forecast/{market_id}/{produce}", get(forecast))
        .route("/evidence/{market_id}/{produce}", get(evidence))
        .route("/history/{market_id}/{produce}", get(history))
        .route("/healthz", get(healthz))
        .route("/admin/run", post(admin_run));
    Router::new().nest("/api/v1", api).with_state(state)
}

/// Serves until the process ends, reloading the published pointer every
/// `refresh` so runs from other processes become visible.
pub async fn serve(state: AppState, addr: SocketAddr, refresh: StdDuration) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    let store = state.store.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(refresh);
        loop {
            tick.tick().await;
            let s = store.clone();
            match tokio::task::spawn_blocking(move || s.refresh()).await {
                Ok(Err(e)) => tracing::warn!(error = %e, "snapshot refresh failed"),
                Err(e) => tracing::warn!(error = %e, "snapshot refresh panicked"),
                Ok(Ok(())) => {}
            }
        }
    });
    axum::serve(listener, router(state)).await
}

async fn markets(State(st): State<AppState>) -> ApiResult<Vec<MarketRecord>> {
    let registry = st.store.registry().map_err(ApiError::internal)?;
    Ok(Json(registry.map(|r| r.markets().to_vec()).unwrap_or_default()))
}

fn produce_list(st: &AppState, snapshot: Option<&Snapshot>) -> Result<Vec<String>, ApiError> {
    match snapshot {
        Some(s) => Ok(s.produce.clone()),
        None => st.store.produce().map_err(ApiError::internal),
    }
}

async fn produce(State(st): State<AppState>) -> ApiResult<Vec<String>> {
    let snapshot = st.store.published();
    Ok(Json(produce_list(&st, snapshot.as_deref())?))
}

/// Resolves the path pair against the registry and a snapshot, in that
/// order, so unknown names get distinct error codes.
fn lookup(st: &AppState, market_id: &str, produce: &str) -> Result<Arc<Snapshot>, ApiError> {
    let registry = st.store.registry().map_err(ApiError::internal)?;
    if registry.as_ref().and_then(|r| r.get(market_id)).is_none() {
        return Err(ApiError::not_found(
            "unknown_market",
            format!("market `{market_id}` is not registered"),
        ));
    }
    let snapshot = st.store.published();
    if !produce_list(st, snapshot.as_deref())?.iter().any(|p| p == produce) {
        return Err(ApiError::not_found(
            "unknown_produce",
            format!("produce `{produce}` is not tracked"),
        ));
    }
    snapshot.ok_or_else(|| ApiError::not_found("no_forecast", "no run has been published yet"))
}

async fn forecast(
    State(st): State<AppState>,
    Path((market_id, produce)): Path<(String, String)>,
) -> ApiResult<ForecastPayload> {
    let snapshot = lookup(&st, &market_id, &produce)?;
    let records = snapshot.forecasts_for(&market_id, &produce);
    if records.is_empty() {
        return Err(ApiError::not_found(
            "no_forecast",
            format!("no forecast for {market_id}/{produce} in run {}", snapshot.id),
        ));
    }
    Ok(Json(forecast_payload(&records)))
}

#[derive(Debug, Deserialize)]
struct EvidenceQuery {
    q: Option<usize>,
}

async fn evidence(
    State(st): State<AppState>,
    Path((market_id, produce)): Path<(String, String)>,
    Query(query): Query<EvidenceQuery>,
) -> ApiResult<Vec<EvidenceEntry>> {
    let snapshot = lookup(&st, &market_id, &produce)?;
    let q = query.q.unwrap_or(1);
    snapshot
        .forecasts_for(&market_id, &produce)
        .into_iter()
        .find(|f| f.q == q)
        .map(|f| Json(f.evidence.clone()))
        .ok_or_else(|| ApiError::not_found("no_forecast", format!("no q={q} forecast for {market_id}/{produce}")))
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    days: Option<usize>,
}

async fn history(
    State(st): State<AppState>,
    Path((market_id, produce)): Path<(String, String)>,
    Query(query): Query<HistoryQuery>,
) -> ApiResult<HistoryPayload> {
    let snapshot = lookup(&st, &market_id, &produce)?;
    let series = snapshot
        .history_for(&market_id, &produce)
        .ok_or_else(|| ApiError::not_found("no_history", format!("no history for {market_id}/{produce}")))?;
    Ok(Json(HistoryPayload {
        market_id,
        produce,
        points: series.tail(query.days.unwrap_or(90)),
    }))
}

async fn healthz(State(st): State<AppState>) -> ApiResult<Health> {
    let runs = st.store.runs().map_err(ApiError::internal)?;
    let last = runs.last();
    Ok(Json(Health {
        status: "ok".into(),
        last_run_date: last.map(|r| r.run_date),
        last_run_ok: last.map(RunReport::succeeded),
    }))
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    date: Option<String>,
}

async fn admin_run(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<RunQuery>,
) -> ApiResult<RunReport> {
    let (Some(token), Some(runner)) = (st.admin_token.clone(), st.runner.clone()) else {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "admin_disabled",
            "no admin token configured",
        ));
    };
    let presented = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(token.as_str()) {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token",
        ));
    }
    let date = match query.date {
        Some(d) => NaiveDate::parse_from_str(&d, "%Y-%m-%d")
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("bad date `{d}`")))?,
        None => Utc::now().date_naive(),
    };
    let store = st.store.clone();
    let report = tokio::task::spawn_blocking(move || {
        run_daily(&store, &runner.sources, runner.sink.as_ref(), &runner.config, date)
    })
    .await
    .map_err(ApiError::internal)?;
    match report {
        Ok(r) => Ok(Json(r)),
        Err(e @ ServiceError::LeaseHeld { .. }) => Err(ApiError::new(StatusCode::CONFLICT, "busy", e.to_string())),
        Err(e) => Err(ApiError::internal(e)),
    }
}
