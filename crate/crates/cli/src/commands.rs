use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::Utc;
use mandi_core::data::{parse_observations, MarketRegistry};
use mandi_core::eval::{sweep, Classifier, CvConfig, DataBundle};
use mandi_core::impute::{soft_impute, ImputeConfig};
use mandi_core::model::LogisticParams;
use mandi_service::api::{serve, AdminRunner, AppState};
use mandi_service::pipeline::{forecast_market, retrain, run_daily, window_panels, RetrainConfig};
use mandi_service::records::ForecastRecord;
use mandi_service::source::{DirectorySource, LogSink, Source};
use mandi_service::store::FileStore;

use crate::config::{load_grid, CliConfig};
use crate::error::CliError;
use crate::{ClassifierArg, Command};

fn open_file(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stdout_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn latest_date(store: &FileStore, produce: &str) -> Result<chrono::NaiveDate, CliError> {
    store
        .observations(produce)?
        .iter()
        .map(|r| r.date)
        .max()
        .ok_or_else(|| CliError::Failed(format!("no archived observations for `{produce}`")))
}

pub fn dispatch(command: Command, config: &CliConfig) -> Result<(), CliError> {
    let store = FileStore::open(&config.store)?;
    match command {
        Command::Ingest { observations, markets } => ingest(&store, &observations, &markets),
        Command::Impute {
            produce,
            max_rank,
            as_of,
        } => impute(&store, config, &produce, max_rank, as_of),
        Command::Train {
            produce,
            market,
            q,
            grid,
            validation_dates,
            as_of,
        } => {
            let mut rc = RetrainConfig {
                pipeline: config.pipeline(),
                validation_dates,
                ..Default::default()
            };
            if let Some(path) = grid {
                rc.grid = load_grid(&path, config)?;
            }
            let outcome = retrain(&store, &produce, &market, q, as_of, &rc)?;
            stdout_json(&serde_json::json!({
                "version": outcome.version,
                "flagged": outcome.flagged,
                "candidate": outcome.candidate,
                "calibration": outcome.calibration.as_ref().map(|c| serde_json::json!({
                    "l": c.l, "coverage": c.coverage, "flagged": c.flagged
                })),
            }))?;
            match outcome.flagged {
                Some(reason) => Err(CliError::Failed(format!("no model stored: {reason}"))),
                None => Ok(()),
            }
        }
        Command::Forecast { produce, market, q } => forecast(&store, config, &produce, &market, q),
        Command::Evaluate {
            from,
            to,
            grid,
            produce,
            q,
            markets,
            classifier,
            frozen_imputation,
        } => {
            let registry = store.require_registry()?;
            let rows = store.observations(&produce)?;
            let as_of = latest_date(&store, &produce)?;
            let panels = window_panels(&rows, &produce, as_of, &registry, &config.pipeline())?
                .ok_or_else(|| CliError::Failed(format!("no observations for `{produce}`")))?;
            let targets = if markets.is_empty() { registry.ids() } else { markets };
            let bundle = DataBundle {
                price: panels.price,
                volume: panels.volume,
                registry,
                target_markets: targets,
            };
            let pc = config.pipeline();
            let cv = CvConfig {
                t1: from,
                t2: to,
                q,
                tau: config.tau,
                grid: load_grid(&grid, config)?,
                classifier: match classifier {
                    ClassifierArg::Forest => Classifier::Forest,
                    ClassifierArg::Logistic => Classifier::Logistic,
                },
                impute: pc.impute,
                forest: pc.forest,
                logistic: LogisticParams::default(),
                frozen_imputation,
                leak_days: 0,
            };
            let result = sweep(&bundle, &cv)?;
            tracing::info!(best = ?result.best, score = result.best_score, "sweep done");
            print!("{}", result.to_csv());
            Ok(())
        }
        Command::DailyRun { date, source_dir } => {
            let date = date.unwrap_or_else(|| Utc::now().with_timezone(&config.timezone).date_naive());
            let dir = source_dir.unwrap_or_else(|| config.data_dir.clone());
            let sources: Vec<Box<dyn Source>> = vec![Box::new(DirectorySource::new(dir))];
            let report = run_daily(&store, &sources, &LogSink, &config.pipeline(), date)?;
            stdout_json(&report)?;
            if report.succeeded() {
                Ok(())
            } else {
                Err(CliError::Failed(format!("daily run for {date} did not complete")))
            }
        }
        Command::Serve { bind } => {
            let addr: SocketAddr = bind
                .parse()
                .map_err(|_| CliError::Usage(format!("--bind: `{bind}` is not an address like 127.0.0.1:8080")))?;
            let token = std::env::var(&config.admin_token_env).ok().filter(|t| !t.is_empty());
            if token.is_none() {
                tracing::warn!(var = %config.admin_token_env, "admin token unset; /admin/run disabled");
            }
            let state = AppState {
                store: Arc::new(store),
                admin_token: token,
                runner: Some(Arc::new(AdminRunner {
                    sources: vec![Box::new(DirectorySource::new(config.data_dir.clone()))],
                    sink: Box::new(LogSink),
                    config: config.pipeline(),
                })),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
            rt.block_on(serve(state, addr, StdDuration::from_secs(5)))
                .map_err(|e| CliError::Failed(format!("serve on {addr}: {e}")))
        }
    }
}

fn ingest(store: &FileStore, observations: &Path, markets: &Path) -> Result<(), CliError> {
    let registry = MarketRegistry::from_csv(open_file(markets)?)
        .map_err(|e| CliError::Failed(format!("{}: {e}", markets.display())))?;
    let rows = parse_observations(open_file(observations)?)
        .map_err(|e| CliError::Failed(format!("{}: {e}", observations.display())))?;
    let unknown: std::collections::BTreeSet<&str> = rows
        .iter()
        .filter(|r| registry.get(&r.market_id).is_none())
        .map(|r| r.market_id.as_str())
        .collect();
    if !unknown.is_empty() {
        tracing::warn!(markets = ?unknown, "rows for unregistered markets are archived but ignored");
    }
    store.put_registry(&registry)?;
    let merged = store.merge_observations(&rows)?;
    for (produce, rows) in &merged {
        store.put_observations(produce, rows)?;
    }
    stdout_json(&serde_json::json!({
        "markets": registry.len(),
        "rows": rows.len(),
        "produce": merged.iter().map(|(p, r)| serde_json::json!({"produce": p, "archived_rows": r.len()})).collect::<Vec<_>>(),
    }))
}

fn impute(
    store: &FileStore,
    config: &CliConfig,
    produce: &str,
    max_rank: Option<usize>,
    as_of: Option<chrono::NaiveDate>,
) -> Result<(), CliError> {
    let registry = store.require_registry()?;
    let rows = store.observations(produce)?;
    let as_of = match as_of {
        Some(d) => d,
        None => latest_date(store, produce)?,
    };
    let panels = window_panels(&rows, produce, as_of, &registry, &config.pipeline())?
        .ok_or_else(|| CliError::Failed(format!("no observations for `{produce}` on or before {as_of}")))?;
    let cfg = ImputeConfig {
        max_rank: max_rank.unwrap_or(config.max_rank).min(registry.len()),
        rng_seed: config.seed,
        ..Default::default()
    };
    let (dense, report) = soft_impute(&panels.price, &cfg)?;
    tracing::info!(
        lambda = report.lambda,
        rank = report.rank,
        holdout_rmse = report.holdout_rmse,
        "imputed"
    );
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    let io = |e: std::io::Error| CliError::Failed(format!("stdout: {e}"));
    writeln!(out, "date,market_id,observed,imputed").map_err(io)?;
    for (m, id) in dense.markets.iter().enumerate() {
        for t in 0..dense.num_days {
            let observed = panels.price.get(m, t).map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", dense.date(t), id, observed, dense.get(m, t)).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn evidence_table(records: &[ForecastRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "q={:<3} {:<5} price {:>9.2}  interval [{:.2}, {:.2}]  p(down/flat/up) {:.2}/{:.2}/{:.2}  model v{}\n",
            r.q,
            r.direction.as_str(),
            r.predicted_price,
            r.interval.lower,
            r.interval.upper,
            r.posterior.down,
            r.posterior.flat,
            r.posterior.up,
            r.model_version
        ));
        s.push_str("  weight  market     step                     window                   price\n");
        for e in &r.evidence {
            s.push_str(&format!(
                "  {:>5.1}%  {:<9}  {} .. {}  {} .. {}  {:>9.2}\n",
                100.0 * e.weight,
                e.market_id,
                e.step_start_date,
                e.step_end_date,
                e.window_start_date,
                e.window_end_date,
                e.neighbor_price
            ));
        }
    }
    s
}

fn forecast(
    store: &FileStore,
    config: &CliConfig,
    produce: &str,
    market: &str,
    q: Option<usize>,
) -> Result<(), CliError> {
    let published: Vec<ForecastRecord> = store
        .published()
        .map(|s| s.forecasts_for(market, produce).into_iter().cloned().collect())
        .unwrap_or_default();
    let mut records = if published.is_empty() {
        tracing::info!("no published forecast; computing from the archive");
        forecast_market(store, produce, market, None, &config.pipeline())?
    } else {
        published
    };
    if let Some(q) = q {
        records.retain(|r| r.q == q);
    }
    if records.is_empty() {
        return Err(CliError::Failed(format!(
            "no forecast for {market}/{produce} (insufficient history?)"
        )));
    }
    eprint!("{}", evidence_table(&records));
    match (q, records.as_slice()) {
        (Some(_), [one]) => stdout_json(one),
        _ => stdout_json(&records),
    }
}
