//! The daily six-stage run and per-market retraining.

use std::time::Instant;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use mandi_core::data::{build_panels, clean_outliers, MarketRegistry, ObservationRow, OutlierPolicy, SparsePanel};
use mandi_core::eval::{impute_pair, sweep, Candidate, Classifier, CvConfig, DataBundle, Grid, SweepResult};
use mandi_core::impute::{DensePanel, ImputeConfig};
use mandi_core::kernel::{
    calibrate_l, classify, evidence, interval_top_l, kernel_weights, posterior, regress_rfnn, split_calibration,
    training_labels, Calibration,
};
use mandi_core::model::{fit_forest, ForestModel, ForestParams, LogisticParams};
use mandi_core::panel::{build_samples, build_test_vector, quantize, FeatureConfig, QuantizedPanel};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::records::{
    ForecastRecord, HistorySeries, ModelArtifact, RunReport, Snapshot, Stage, StageReport, StageStatus,
};
use crate::source::{ReportSink, Source};
use crate::store::{merge_rows, FileStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Forecast horizons in days; each is also the quantization block size.
    pub horizons: Vec<usize>,
    pub tau: usize,
    pub k: usize,
    /// Days of archive, ending on the run date, that feed one run.
    pub history_days: usize,
    pub impute: ImputeConfig,
    pub forest: ForestParams,
    pub outliers: OutlierPolicy,
    /// Target coverage when calibrating interval width.
    pub alpha: f64,
    pub calibration_fraction: f64,
    pub evidence_top_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1, 7, 14, 28],
            tau: 10,
            k: 5,
            history_days: 730,
            impute: ImputeConfig::default(),
            forest: ForestParams::default(),
            outliers: OutlierPolicy::default(),
            alpha: 0.8,
            calibration_fraction: 0.2,
            evidence_top_n: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(ServiceError::Invalid(
                "horizons must be a nonempty list of positive days".into(),
            ));
        }
        if self.tau == 0 || self.k == 0 || self.history_days == 0 {
            return Err(ServiceError::Invalid("tau, k and history_days must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return Err(ServiceError::Invalid("calibration_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Raw and cleaned panels for one produce over the run window.
#[derive(Debug, Clone)]
pub struct WindowPanels {
    pub produce: String,
    pub raw_price: SparsePanel,
    pub price: SparsePanel,
    pub volume: SparsePanel,
    pub outliers_removed: usize,
}

/// Builds the `[as_of - history_days + 1, as_of]` window for `produce`,
/// starting no earlier than the first archived row. `None` when the
/// archive has nothing on or before `as_of`.
pub fn window_panels(
    rows: &[ObservationRow],
    produce: &str,
    as_of: NaiveDate,
    registry: &MarketRegistry,
    config: &PipelineConfig,
) -> Result<Option<WindowPanels>> {
    let Some(first) = rows
        .iter()
        .filter(|r| r.produce == produce && r.date <= as_of)
        .map(|r| r.date)
        .min()
    else {
        return Ok(None);
    };
    let start = first.max(as_of - Duration::days(config.history_days as i64 - 1));
    let days = (as_of - start).num_days() as usize + 1;
    let (raw_price, volume, ingest) = build_panels(rows, produce, start, days, registry)?;
    if !ingest.unknown_markets.is_empty() {
        tracing::warn!(produce, markets = ?ingest.unknown_markets, "rows for unregistered markets ignored");
    }
    let (price, cleaned) = clean_outliers(&raw_price, &config.outliers);
    Ok(Some(WindowPanels {
        produce: produce.to_string(),
        raw_price,
        price,
        volume,
        outliers_removed: cleaned.removed.len(),
    }))
}

/// Quantizes with blocks aligned so the last one ends on the panel's last
/// day. `None` when the panel is shorter than one block.
pub fn anchored_quantize(dense: &DensePanel, q: usize) -> Result<Option<QuantizedPanel>> {
    let len = dense.num_days / q * q;
    if len == 0 {
        return Ok(None);
    }
    let tail = dense.slice_days(dense.num_days - len, len)?;
    Ok(Some(quantize(&tail, q)?))
}

/// Fits a forest on the older part of the market's samples and calibrates
/// the interval width on the most recent part. `None` if either part would
/// be empty.
#[allow(clippy::too_many_arguments)]
pub fn fit_calibrated(
    price_qp: &QuantizedPanel,
    volume_qp: &QuantizedPanel,
    market_id: &str,
    features: &FeatureConfig,
    registry: &MarketRegistry,
    forest: &ForestParams,
    alpha: f64,
    calibration_fraction: f64,
) -> Result<Option<(ForestModel, Calibration)>> {
    let samples = build_samples(price_qp, volume_qp, market_id, features, registry)?;
    let (fit, cal) = split_calibration(&samples, calibration_fraction);
    if fit.is_empty() || cal.is_empty() {
        return Ok(None);
    }
    let model = fit_forest(fit, forest)?;
    let calibration = calibrate_l(&model, &cal, alpha)?;
    Ok(Some((model, calibration)))
}

/// Inputs describing one forecast beyond the model itself.
pub struct ForecastContext<'a> {
    pub produce: &'a str,
    pub market_id: &'a str,
    pub q: usize,
    pub tau: usize,
    pub generated_at: DateTime<Utc>,
    pub evidence_top_n: usize,
}

/// Forecast for the step after the last one in `price_qp`.
pub fn forecast_next(
    model: &ForestModel,
    l: usize,
    model_version: u64,
    price_qp: &QuantizedPanel,
    volume_qp: &QuantizedPanel,
    ctx: &ForecastContext,
) -> Result<ForecastRecord> {
    let features = FeatureConfig { tau: ctx.tau, k: 1 };
    let x = build_test_vector(price_qp, volume_qp, ctx.market_id, &features, price_qp.num_steps + 1)?;
    let weights = kernel_weights(model, &x)?;
    let eta = posterior(&weights, &training_labels(model));
    Ok(ForecastRecord {
        generated_at: ctx.generated_at,
        market_id: ctx.market_id.to_string(),
        produce: ctx.produce.to_string(),
        q: ctx.q,
        direction: classify(&eta),
        posterior: eta.into(),
        predicted_price: regress_rfnn(&weights),
        interval: interval_top_l(&weights, l)?,
        evidence: evidence(&weights, Some(ctx.evidence_top_n)),
        model_version,
    })
}

/// Markets with at least one observed price in the panel.
fn markets_with_data(panel: &SparsePanel) -> Vec<String> {
    (0..panel.num_markets())
        .filter(|&m| panel.row(m).iter().any(Option::is_some))
        .map(|m| panel.markets[m].clone())
        .collect()
}

/// Forecasts for one produce panel over every configured horizon.
struct ProduceForecasts {
    records: Vec<ForecastRecord>,
    history: Vec<HistorySeries>,
    insufficient: usize,
}

fn forecast_produce(
    store: &FileStore,
    panels: &WindowPanels,
    registry: &MarketRegistry,
    config: &PipelineConfig,
    generated_at: DateTime<Utc>,
    only_market: Option<&str>,
) -> Result<ProduceForecasts> {
    let (price, volume) = impute_pair(&panels.price, &panels.volume, &config.impute)?;
    let mut markets = markets_with_data(&panels.price);
    if let Some(m) = only_market {
        markets.retain(|x| x == m);
    }
    let features = FeatureConfig {
        tau: config.tau,
        k: config.k.min(registry.len()),
    };
    let mut out = ProduceForecasts {
        records: Vec::new(),
        history: Vec::new(),
        insufficient: 0,
    };
    for market in &markets {
        let m = price.market_index(market).expect("panel rows follow the registry");
        out.history.push(HistorySeries {
            market_id: market.clone(),
            produce: panels.produce.clone(),
            start_date: price.start_date,
            raw: panels.raw_price.row(m).to_vec(),
            imputed: price.row(m).to_vec(),
        });
    }
    for &q in &config.horizons {
        let (Some(pq), Some(vq)) = (anchored_quantize(&price, q)?, anchored_quantize(&volume, q)?) else {
            out.insufficient += markets.len();
            continue;
        };
        for market in &markets {
            if pq.num_steps < config.tau + 1 {
                out.insufficient += 1;
                continue;
            }
            let ctx = ForecastContext {
                produce: &panels.produce,
                market_id: market,
                q,
                tau: config.tau,
                generated_at,
                evidence_top_n: config.evidence_top_n,
            };
            let stored = store
                .current_model(&panels.produce, market, q)?
                .filter(|a| a.tau == config.tau && a.forest.num_features == 2 * config.tau);
            let record = match stored {
                Some(a) => forecast_next(&a.forest, a.l, a.version, &pq, &vq, &ctx)?,
                None => {
                    let fitted = fit_calibrated(
                        &pq,
                        &vq,
                        market,
                        &features,
                        registry,
                        &config.forest,
                        config.alpha,
                        config.calibration_fraction,
                    )?;
                    let Some((model, cal)) = fitted else {
                        out.insufficient += 1;
                        continue;
                    };
                    forecast_next(&model, cal.l, 0, &pq, &vq, &ctx)?
                }
            };
            out.records.push(record);
        }
    }
    Ok(out)
}

/// Forecasts for one market and produce from the archive, without touching
/// the published snapshot.
pub fn forecast_market(
    store: &FileStore,
    produce: &str,
    market_id: &str,
    as_of: Option<NaiveDate>,
    config: &PipelineConfig,
) -> Result<Vec<ForecastRecord>> {
    config.validate()?;
    let registry = store.require_registry()?;
    if registry.get(market_id).is_none() {
        return Err(mandi_core::Error::UnknownMarket(market_id.to_string()).into());
    }
    let rows = store.observations(produce)?;
    let as_of = match as_of.or_else(|| rows.iter().map(|r| r.date).max()) {
        Some(d) => d,
        None => {
            return Err(ServiceError::NotFound(format!(
                "no archived observations for {produce}"
            )))
        }
    };
    let Some(panels) = window_panels(&rows, produce, as_of, &registry, config)? else {
        return Ok(Vec::new());
    };
    Ok(forecast_produce(store, &panels, &registry, config, Utc::now(), Some(market_id))?.records)
}

/// Tracks stage outcomes; once a stage fails the rest are skipped.
struct Stages {
    done: Vec<StageReport>,
    failed: bool,
}

impl Stages {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Option<T> {
        if self.failed {
            self.skip(stage);
            return None;
        }
        let t0 = Instant::now();
        let result = f();
        let seconds = t0.elapsed().as_secs_f64();
        match result {
            Ok(v) => {
                tracing::info!(stage = stage.as_str(), seconds, "stage ok");
                self.done.push(StageReport {
                    stage,
                    status: StageStatus::Ok,
                    seconds,
                    error: None,
                });
                Some(v)
            }
            Err(e) => {
                tracing::error!(stage = stage.as_str(), error = %e, "stage failed");
                self.failed = true;
                self.done.push(StageReport {
                    stage,
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                });
                None
            }
        }
    }

    fn skip(&mut self, stage: Stage) {
        tracing::info!(stage = stage.as_str(), "stage skipped");
        self.done.push(StageReport {
            stage,
            status: StageStatus::Skipped,
            seconds: 0.0,
            error: None,
        });
    }
}

/// Reader-facing invariants of a staged snapshot.
fn check_snapshot(snapshot: &Snapshot, expected_forecasts: usize) -> Result<()> {
    if snapshot.forecasts.len() != expected_forecasts {
        return Err(ServiceError::Invalid(format!(
            "staged snapshot holds {} forecasts, expected {expected_forecasts}",
            snapshot.forecasts.len()
        )));
    }
    for f in &snapshot.forecasts {
        let bad = if (f.posterior.sum() - 1.0).abs() > 1e-9 {
            Some("posterior does not sum to 1")
        } else if f.interval.lower > f.interval.upper {
            Some("interval lower bound exceeds upper")
        } else if f.evidence.windows(2).any(|w| w[0].weight < w[1].weight) {
            Some("evidence not sorted by weight")
        } else {
            None
        };
        if let Some(msg) = bad {
            return Err(ServiceError::Invalid(format!(
                "{}/{}/q{}: {msg}",
                f.market_id, f.produce, f.q
            )));
        }
    }
    Ok(())
}

/// Runs acquire, clean, predict, archive, check and report for `as_of`.
///
/// A failed stage skips every later one; the run report is persisted and
/// emitted regardless. The persisted copy shows the report stage's own
/// duration as zero since it is written from inside that stage. Readers only see the new snapshot once check passes.
/// Returns an error only when the run could not start.
pub fn run_daily(
    store: &FileStore,
    sources: &[Box<dyn Source>],
    sink: &dyn ReportSink,
    config: &PipelineConfig,
    as_of: NaiveDate,
) -> Result<RunReport> {
    if sources.is_empty() {
        return Err(ServiceError::Invalid("no observation sources configured".into()));
    }
    config.validate()?;
    let _lease = store.lease("daily-run")?;
    let registry = store.require_registry()?;
    let attempt = store.runs()?.iter().filter(|r| r.run_date == as_of).count() as u32 + 1;
    let started_at = Utc::now();
    let snapshot_id = format!("{as_of}.{attempt}");
    tracing::info!(%as_of, attempt, "daily run started");

    let mut stages = Stages {
        done: Vec::with_capacity(6),
        failed: false,
    };
    let mut report = RunReport {
        run_date: as_of,
        attempt,
        started_at,
        stages: Vec::new(),
        rows_acquired: 0,
        outliers_removed: 0,
        forecasts_written: 0,
        insufficient_history: 0,
        snapshot_id: None,
        published: false,
    };

    let acquired = stages.run(Stage::Acquire, || {
        let mut rows = Vec::new();
        for s in sources {
            let got = s.fetch(as_of)?;
            tracing::info!(source = s.name(), rows = got.len(), "acquired");
            rows.extend(got);
        }
        Ok(rows)
    });
    report.rows_acquired = acquired.as_ref().map_or(0, Vec::len);

    let cleaned = stages.run(Stage::Clean, || {
        let rows = acquired.unwrap_or_default();
        let mut produce = store.produce()?;
        produce.extend(rows.iter().map(|r| r.produce.clone()));
        produce.sort();
        produce.dedup();
        let mut out = Vec::with_capacity(produce.len());
        for p in produce {
            let merged = merge_rows(store.observations(&p)?, rows.iter().filter(|r| r.produce == p).cloned());
            let panels = window_panels(&merged, &p, as_of, &registry, config)?;
            out.push((p, merged, panels));
        }
        Ok(out)
    });
    report.outliers_removed = cleaned
        .iter()
        .flatten()
        .filter_map(|(_, _, w)| w.as_ref().map(|w| w.outliers_removed))
        .sum();

    let predicted = stages.run(Stage::Predict, || {
        let mut forecasts = Vec::new();
        let mut history = Vec::new();
        let mut insufficient = 0;
        for (_, _, panels) in cleaned.iter().flatten() {
            let Some(panels) = panels else { continue };
            let f = forecast_produce(store, panels, &registry, config, started_at, None)?;
            forecasts.extend(f.records);
            history.extend(f.history);
            insufficient += f.insufficient;
        }
        forecasts.sort_by(|a, b| (&a.market_id, &a.produce, a.q).cmp(&(&b.market_id, &b.produce, b.q)));
        Ok((forecasts, history, insufficient))
    });
    if let Some((_, _, insufficient)) = &predicted {
        report.insufficient_history = *insufficient;
    }

    let archived = stages.run(Stage::Archive, || {
        let cleaned = cleaned.expect("archive runs only after clean");
        let (forecasts, history, _) = predicted.expect("archive runs only after predict");
        for (p, merged, _) in &cleaned {
            store.put_observations(p, merged)?;
        }
        let snapshot = Snapshot {
            id: snapshot_id.clone(),
            as_of_date: as_of,
            generated_at: started_at,
            produce: cleaned.iter().map(|(p, _, _)| p.clone()).collect(),
            forecasts,
            history,
        };
        store.stage_snapshot(&snapshot)?;
        Ok(snapshot.forecasts.len())
    });

    stages.run(Stage::Check, || {
        let expected = archived.expect("check runs only after archive");
        let staged = store.load_snapshot(&snapshot_id)?;
        check_snapshot(&staged, expected)?;
        store.publish(&snapshot_id)?;
        report.forecasts_written = expected;
        report.snapshot_id = Some(snapshot_id.clone());
        report.published = true;
        Ok(())
    });

    // the report stage records itself, so its outcome is settled before
    // the report is persisted
    if stages.failed {
        stages.skip(Stage::Report);
    } else {
        stages.done.push(StageReport {
            stage: Stage::Report,
            status: StageStatus::Ok,
            seconds: 0.0,
            error: None,
        });
    }
    report.stages = stages.done;
    let t0 = Instant::now();
    let persisted = store.append_run(&report).and_then(|_| sink.emit(&report));
    let last = report.stages.last_mut().expect("six stages");
    last.seconds = t0.elapsed().as_secs_f64();
    if let Err(e) = persisted {
        tracing::error!(error = %e, "report stage failed");
        if last.status == StageStatus::Ok {
            last.status = StageStatus::Failed;
        }
        last.error = Some(e.to_string());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub pipeline: PipelineConfig,
    pub grid: Grid,
    /// Number of walk-forward validation dates, spaced `q` days apart.
    pub validation_dates: usize,
    pub frozen_imputation: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            grid: Grid {
                max_rank: vec![5, 10],
                k: vec![1, 5],
                c: vec![1.0],
                num_trees: vec![100],
            },
            validation_dates: 8,
            frozen_imputation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    /// New model version, or `None` when retraining was refused.
    pub version: Option<u64>,
    /// Why no version was produced.
    pub flagged: Option<String>,
    pub candidate: Option<Candidate>,
    pub sweep: Option<SweepResult>,
    pub calibration: Option<Calibration>,
}

impl RetrainOutcome {
    fn flagged(reason: String) -> Self {
        tracing::warn!(%reason, "retrain refused");
        Self {
            version: None,
            flagged: Some(reason),
            candidate: None,
            sweep: None,
            calibration: None,
        }
    }
}

/// Selects hyperparameters by walk-forward sweep on the archive, fits a
/// fresh forest with a calibrated interval width and stores it as the next
/// version for (produce, market, q).
pub fn retrain(
    store: &FileStore,
    produce: &str,
    market_id: &str,
    q: usize,
    as_of: Option<NaiveDate>,
    config: &RetrainConfig,
) -> Result<RetrainOutcome> {
    let pc = &config.pipeline;
    pc.validate()?;
    if q == 0 {
        return Err(ServiceError::Invalid("q must be positive".into()));
    }
    let _lease = store.lease("retrain")?;
    let registry = store.require_registry()?;
    if registry.get(market_id).is_none() {
        return Err(mandi_core::Error::UnknownMarket(market_id.to_string()).into());
    }
    let rows = store.observations(produce)?;
    let Some(as_of) = as_of.or_else(|| rows.iter().map(|r| r.date).max()) else {
        return Ok(RetrainOutcome::flagged(format!(
            "no archived observations for {produce}"
        )));
    };
    let Some(panels) = window_panels(&rows, produce, as_of, &registry, pc)? else {
        return Ok(RetrainOutcome::flagged(format!(
            "no observations for {produce} on or before {as_of}"
        )));
    };
    let steps = panels.price.num_days / q;
    if steps < pc.tau + 1 {
        return Ok(RetrainOutcome::flagged(format!(
            "insufficient history: {steps} steps of {q} days, need {}",
            pc.tau + 1
        )));
    }

    let grid = Grid {
        k: config.grid.k.iter().copied().filter(|&k| k <= registry.len()).collect(),
        ..config.grid.clone()
    };
    let fallback = Candidate {
        max_rank: *grid.max_rank.first().unwrap_or(&pc.impute.max_rank),
        k: *grid.k.first().unwrap_or(&pc.k.min(registry.len())),
        c: *grid.c.first().unwrap_or(&1.0),
        num_trees: *grid.num_trees.first().unwrap_or(&pc.forest.num_trees),
    };
    let start = panels.price.start_date;
    // validation dates need tau + 1 blocks of history before them and one
    // block of ground truth after
    let t2 = as_of - Duration::days(q as i64 - 1);
    let earliest = start + Duration::days(((pc.tau + 1) * q) as i64);
    let t1 = (t2 - Duration::days((config.validation_dates.saturating_sub(1) * q) as i64)).max(earliest);
    let sweep_result = if grid.size() > 0 && config.validation_dates >= 2 && t1 < t2 {
        let bundle = DataBundle {
            price: panels.price.clone(),
            volume: panels.volume.clone(),
            registry: registry.clone(),
            target_markets: vec![market_id.to_string()],
        };
        let cv = CvConfig {
            t1,
            t2,
            q,
            tau: pc.tau,
            grid,
            classifier: Classifier::Forest,
            impute: pc.impute.clone(),
            forest: pc.forest.clone(),
            logistic: LogisticParams::default(),
            frozen_imputation: config.frozen_imputation,
            leak_days: 0,
        };
        Some(sweep(&bundle, &cv)?)
    } else {
        tracing::warn!("not enough history for a validation sweep; using the first grid candidate");
        None
    };
    let best = sweep_result.as_ref().map_or(fallback, |s| s.best);

    let impute = ImputeConfig {
        max_rank: best.max_rank,
        ..pc.impute.clone()
    };
    let (price, volume) = impute_pair(&panels.price, &panels.volume, &impute)?;
    let (Some(pq), Some(vq)) = (anchored_quantize(&price, q)?, anchored_quantize(&volume, q)?) else {
        return Ok(RetrainOutcome::flagged("panel shorter than one block".into()));
    };
    let forest = ForestParams {
        num_trees: best.num_trees,
        ..pc.forest.clone()
    };
    let features = FeatureConfig { tau: pc.tau, k: best.k };
    let fitted = fit_calibrated(
        &pq,
        &vq,
        market_id,
        &features,
        &registry,
        &forest,
        pc.alpha,
        pc.calibration_fraction,
    )?;
    let Some((model, calibration)) = fitted else {
        return Ok(RetrainOutcome::flagged("too few samples to fit and calibrate".into()));
    };
    let version = store.latest_model_version(produce, market_id, q)? + 1;
    store.put_model(&ModelArtifact {
        produce: produce.to_string(),
        market_id: market_id.to_string(),
        q,
        version,
        tau: pc.tau,
        k: best.k,
        max_rank: best.max_rank,
        l: calibration.l,
        calibration_coverage: calibration.coverage,
        calibration_flagged: calibration.flagged,
        trained_through: as_of,
        forest: model,
    })?;
    tracing::info!(produce, market_id, q, version, l = calibration.l, "model stored");
    Ok(RetrainOutcome {
        version: Some(version),
        flagged: None,
        candidate: Some(best),
        sweep: sweep_result,
        calibration: Some(calibration),
    })
}
