#![allow(dead_code)]

use chrono::{Duration, NaiveDate};
use mandi_core::data::{write_observations, ObservationRow};
use mandi_core::impute::ImputeConfig;
use mandi_core::model::ForestParams;
use mandi_core::synthetic::{seasonal, SeasonalSpec};
use mandi_service::pipeline::PipelineConfig;
use mandi_service::source::{DirectorySource, LogSink, Source};
use mandi_service::store::FileStore;

pub const MARKETS: usize = 3;

/// Three markets with 400 days of tomato and 100 days of onion, archived up
/// to the day before `run_date()`; the run date's rows sit in `{dir}/days`.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub store: FileStore,
}

pub fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).unwrap()
}

pub fn run_date() -> NaiveDate {
    start() + Duration::days(399)
}

fn rows(
    produce: &str,
    days: usize,
    offset: usize,
    seed: u64,
) -> (Vec<ObservationRow>, mandi_core::data::MarketRegistry) {
    let spec = SeasonalSpec {
        produce: produce.into(),
        markets: MARKETS,
        days,
        start_date: start() + Duration::days(offset as i64),
        seed,
        ..Default::default()
    };
    let data = seasonal(&spec);
    (
        data.rows.into_iter().filter(|r| r.modal_price.is_some()).collect(),
        data.registry,
    )
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = FileStore::open(dir.path().join("store")).unwrap();
    let (tomato, registry) = rows("tomato", 400, 0, 1);
    let (onion, _) = rows("onion", 100, 300, 2);
    store.put_registry(&registry).unwrap();
    let day = run_date();
    let (hist_t, today_t): (Vec<_>, Vec<_>) = tomato.into_iter().partition(|r| r.date < day);
    let (hist_o, today_o): (Vec<_>, Vec<_>) = onion.into_iter().partition(|r| r.date < day);
    store.put_observations("tomato", &hist_t).unwrap();
    store.put_observations("onion", &hist_o).unwrap();
    let days = dir.path().join("days");
    std::fs::create_dir_all(&days).unwrap();
    let today: Vec<_> = today_t.into_iter().chain(today_o).collect();
    std::fs::write(days.join(format!("{day}.csv")), write_observations(&today)).unwrap();
    Fixture { dir, store }
}

impl Fixture {
    pub fn sources(&self) -> Vec<Box<dyn Source>> {
        vec![Box::new(DirectorySource::new(self.days_dir()))]
    }

    pub fn days_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("days")
    }

    pub fn reopen(&self) -> FileStore {
        FileStore::open(self.store.root()).unwrap()
    }
}

pub fn config() -> PipelineConfig {
    PipelineConfig {
        k: 3,
        impute: ImputeConfig {
            max_rank: 3,
            rng_seed: 5,
            ..Default::default()
        },
        forest: ForestParams {
            num_trees: 15,
            rng_seed: 6,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn sink() -> LogSink {
    LogSink
}
