mod common;

use chrono::Duration;
use common::{config, fixture, run_date, sink, MARKETS};
use mandi_core::eval::Grid;
use mandi_service::pipeline::{forecast_market, retrain, run_daily, RetrainConfig};
use mandi_service::records::{Stage, StageStatus};

// tomato: 400 days, every horizon has >= tau + 1 blocks.
// onion: 100 days, only q = 1 and q = 7 do (100/14 = 7 and 100/28 = 3 < 11).
const EXPECTED_FORECASTS: usize = MARKETS * 4 + MARKETS * 2;

#[test]
fn successful_run_publishes_every_forecast() {
    let fx = fixture();
    let report = run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap();
    assert_eq!(report.statuses(), vec![StageStatus::Ok; 6], "{report:?}");
    let order: Vec<Stage> = report.stages.iter().map(|s| s.stage).collect();
    assert_eq!(order, Stage::ALL.to_vec());
    assert!(report.rows_acquired > 0 && report.rows_acquired <= 2 * MARKETS);
    assert_eq!(report.forecasts_written, EXPECTED_FORECASTS);
    assert_eq!(report.insufficient_history, MARKETS * 2);
    assert!(report.published);

    let snap = fx.store.published().expect("published");
    assert_eq!(Some(snap.id.clone()), report.snapshot_id);
    assert_eq!(snap.forecasts.len(), EXPECTED_FORECASTS);
    assert_eq!(snap.produce, vec!["onion", "tomato"]);
    for f in &snap.forecasts {
        assert!((f.posterior.sum() - 1.0).abs() < 1e-9);
        assert!(f.interval.lower <= f.interval.upper);
        assert!(f.predicted_price > 0.0);
        assert!(!f.evidence.is_empty() && f.evidence.len() <= 5);
        assert!(f.evidence.windows(2).all(|w| w[0].weight >= w[1].weight));
        assert_eq!(f.model_version, 0);
        for e in &f.evidence {
            let h = snap
                .history_for(&e.market_id, &f.produce)
                .expect("evidence market archived");
            assert!(e.window_start_date >= h.start_date);
            assert!(e.step_end_date <= run_date());
        }
    }
    let tomato = snap.history_for("MKT000", "tomato").unwrap();
    assert_eq!(tomato.imputed.len(), 400);
    // the stored copy is written before the report stage's own timing is known
    let mut stored = fx.store.runs().unwrap();
    assert_eq!(stored.len(), 1);
    stored[0].stages[5].seconds = report.stages[5].seconds;
    assert_eq!(stored[0], report);

    // the archive now includes the run date, and a fresh handle sees the run
    let archived = fx.store.observations("tomato").unwrap();
    assert_eq!(archived.iter().map(|r| r.date).max(), Some(run_date()));
    assert_eq!(fx.reopen().published().unwrap().id, snap.id);
}

#[test]
fn missing_source_file_fails_acquire_and_keeps_the_old_snapshot() {
    let fx = fixture();
    run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap();
    let before = fx.store.published().unwrap().id.clone();

    let next = run_date() + Duration::days(1);
    let report = run_daily(&fx.store, &fx.sources(), &sink(), &config(), next).unwrap();
    let mut expected = vec![StageStatus::Skipped; 6];
    expected[0] = StageStatus::Failed;
    assert_eq!(report.statuses(), expected);
    assert!(report.stages[0]
        .error
        .as_deref()
        .unwrap()
        .contains(&format!("{next}.csv")));
    assert!(!report.published);
    assert_eq!(fx.store.published().unwrap().id, before);
    assert_eq!(fx.reopen().published().unwrap().id, before);
    assert_eq!(fx.store.runs().unwrap().len(), 2, "failed runs are still reported");
}

#[test]
fn rerunning_a_date_overwrites_the_same_records() {
    let fx = fixture();
    let first = run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap();
    let snap1 = fx.store.published().unwrap();
    let archive1 = fx.store.observations("tomato").unwrap();
    let second = run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap();
    let snap2 = fx.store.published().unwrap();
    assert_eq!((first.attempt, second.attempt), (1, 2));
    assert_eq!(second.forecasts_written, first.forecasts_written);
    assert_ne!(snap1.id, snap2.id);
    assert_eq!(fx.store.observations("tomato").unwrap(), archive1);
    let key = |s: &mandi_service::records::Snapshot| {
        s.forecasts
            .iter()
            .map(|f| {
                (
                    f.market_id.clone(),
                    f.produce.clone(),
                    f.q,
                    f.direction,
                    f.predicted_price.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&snap1), key(&snap2));
    assert_eq!(snap1.history, snap2.history);
}

#[test]
fn runs_are_single_writer() {
    let fx = fixture();
    let _held = fx.store.lease("someone else").unwrap();
    let err = run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap_err();
    assert!(matches!(err, mandi_service::ServiceError::LeaseHeld { .. }));
    assert!(fx.store.runs().unwrap().is_empty());
}

fn small_retrain() -> RetrainConfig {
    RetrainConfig {
        pipeline: config(),
        grid: Grid {
            max_rank: vec![2, 3],
            k: vec![1, 3],
            c: vec![1.0],
            num_trees: vec![10],
        },
        validation_dates: 3,
        frozen_imputation: false,
    }
}

#[test]
fn retrained_models_are_versioned_and_served() {
    let fx = fixture();
    let cfg = small_retrain();
    let a = retrain(&fx.store, "tomato", "MKT001", 7, None, &cfg).unwrap();
    assert_eq!(a.version, Some(1));
    assert_eq!(a.sweep.as_ref().unwrap().table.len(), 4);
    let b = retrain(&fx.store, "tomato", "MKT001", 7, None, &cfg).unwrap();
    assert_eq!(b.version, Some(2));
    let m1 = fx.store.model("tomato", "MKT001", 7, 1).unwrap();
    let m2 = fx.store.model("tomato", "MKT001", 7, 2).unwrap();
    assert_eq!(m1.forest.to_json().unwrap(), m2.forest.to_json().unwrap());
    assert_eq!(fx.store.current_model_version("tomato", "MKT001", 7).unwrap(), Some(2));

    run_daily(&fx.store, &fx.sources(), &sink(), &config(), run_date()).unwrap();
    let snap = fx.store.published().unwrap();
    for f in &snap.forecasts {
        let expected = if f.market_id == "MKT001" && f.produce == "tomato" && f.q == 7 {
            2
        } else {
            0
        };
        assert_eq!(f.model_version, expected, "{}/{}/q{}", f.market_id, f.produce, f.q);
    }
    let f = snap.forecasts.iter().find(|f| f.model_version == 2).unwrap();
    assert_eq!(f.interval.method.param() as usize, m2.l);
}

#[test]
fn retrain_without_enough_history_is_flagged() {
    let fx = fixture();
    // 99 archived onion days give 3 blocks of 28, fewer than tau + 1
    let out = retrain(&fx.store, "onion", "MKT000", 28, None, &small_retrain()).unwrap();
    assert_eq!(out.version, None);
    assert!(out.flagged.unwrap().contains("insufficient history"));
    assert_eq!(fx.store.current_model_version("onion", "MKT000", 28).unwrap(), None);
    assert_eq!(fx.store.latest_model_version("onion", "MKT000", 28).unwrap(), 0);
}

#[test]
fn on_demand_forecast_covers_each_horizon() {
    let fx = fixture();
    let records = forecast_market(&fx.store, "tomato", "MKT002", None, &config()).unwrap();
    let qs: Vec<usize> = records.iter().map(|r| r.q).collect();
    assert_eq!(qs, vec![1, 7, 14, 28]);
    assert!(forecast_market(&fx.store, "tomato", "nope", None, &config()).is_err());
}
