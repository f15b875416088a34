use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Duration, NaiveDate};
use mandi_core::data::{write_observations, ObservationRow};
use mandi_core::synthetic::{seasonal, SeasonalSpec};

const MARKETS: usize = 4;
const DAYS: usize = 200;

struct Workspace {
    dir: tempfile::TempDir,
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).unwrap()
}

fn last_day() -> NaiveDate {
    start() + Duration::days(DAYS as i64 - 1)
}

impl Workspace {
    /// Registry and archive CSVs for the first `DAYS - 1` days, the last
    /// day's rows under `days/`, and a small config file.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = seasonal(&SeasonalSpec {
            produce: "tomato".into(),
            markets: MARKETS,
            days: DAYS,
            start_date: start(),
            seed: 3,
            ..Default::default()
        });
        let rows: Vec<ObservationRow> = data.rows.into_iter().filter(|r| r.modal_price.is_some()).collect();
        let (hist, today): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.date < last_day());
        std::fs::write(dir.path().join("markets.csv"), data.registry.to_csv()).unwrap();
        std::fs::write(dir.path().join("obs.csv"), write_observations(&hist)).unwrap();
        std::fs::create_dir_all(dir.path().join("days")).unwrap();
        std::fs::write(
            dir.path().join("days").join(format!("{}.csv", last_day())),
            write_observations(&today),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("mandi.conf"),
            format!(
                "store = {}\ndata_dir = {}\ntau = 4\nk = 2\nmax_rank = 3\nnum_trees = 10\nhorizons = 1,7\nseed = 11\n",
                dir.path().join("store").display(),
                dir.path().join("days").display()
            ),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("grid.conf"),
            "max_rank = 2,3\nk = 1,2\nC = 1\nnum_trees = 5\n",
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn mandi(&self, args: &[&str]) -> Output {
        let config = self.path("mandi.conf");
        Command::new(env!("CARGO_BIN_EXE_mandi"))
            .arg("--config")
            .arg(&config)
            .arg("--log")
            .arg("warn")
            .args(args)
            .output()
            .unwrap()
    }

    fn ingest(&self) -> Output {
        let obs = self.path("obs.csv");
        let markets = self.path("markets.csv");
        self.mandi(&["ingest", "--observations", s(&obs), "--markets", s(&markets)])
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let ws = Workspace::new();
    let out = ws.mandi(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn bad_config_value_names_the_line() {
    let ws = Workspace::new();
    std::fs::write(ws.path("mandi.conf"), "tau = 4\nk = many\n").unwrap();
    let out = ws.mandi(&["forecast", "--produce", "tomato", "--market", "MKT000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn malformed_ingest_reports_the_line_and_stores_nothing() {
    let ws = Workspace::new();
    let mut text = std::fs::read_to_string(ws.path("obs.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5] = "2016-01-03,MKT000,tomato,not-a-price,1.0".into();
    text = lines.join("\n");
    std::fs::write(ws.path("obs.csv"), text).unwrap();
    let out = ws.ingest();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 6"), "{}", stderr(&out));
    assert!(!ws.path("store").join("observations").exists());
}

#[test]
fn ingest_then_forecast_prints_normalized_posteriors() {
    let ws = Workspace::new();
    let out = ws.ingest();
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["markets"], MARKETS);

    let out = ws.mandi(&["forecast", "--produce", "tomato", "--market", "MKT001", "--q", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let p = &record["posterior"];
    let sum = p["down"].as_f64().unwrap() + p["flat"].as_f64().unwrap() + p["up"].as_f64().unwrap();
    assert!((sum - 1.0).abs() < 1e-9, "{sum}");
    assert_eq!(record["q"], 1);
    let lo = record["interval"]["lower"].as_f64().unwrap();
    let hi = record["interval"]["upper"].as_f64().unwrap();
    assert!(lo <= hi);
    assert!(stderr(&out).contains("weight"), "evidence table goes to stderr");
}

#[test]
fn impute_prints_every_cell() {
    let ws = Workspace::new();
    assert!(ws.ingest().status.success());
    let out = ws.mandi(&["impute", "--produce", "tomato"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("date,market_id,observed,imputed"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), MARKETS * (DAYS - 1));
    for line in body {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        assert!(fields[3].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn evaluate_prints_one_row_per_grid_point() {
    let ws = Workspace::new();
    assert!(ws.ingest().status.success());
    let grid = ws.path("grid.conf");
    let out = ws.mandi(&[
        "evaluate",
        "--from",
        "2016-06-01",
        "--to",
        "2016-06-10",
        "--grid",
        s(&grid),
        "--produce",
        "tomato",
        "--markets",
        "MKT000,MKT002",
        "--frozen-imputation",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "candidate_id,max_rank,k,C,num_trees,mean_score,n_dates_used");
    assert_eq!(lines.len(), 1 + 2 * 2);
    for row in &lines[1..] {
        let n: usize = row.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(n, 10, "{row}");
    }
}

#[test]
fn daily_run_publishes_and_train_bumps_the_version() {
    let ws = Workspace::new();
    assert!(ws.ingest().status.success());
    let date = last_day().to_string();
    let out = ws.mandi(&["daily-run", "--date", &date]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["published"], true);
    let statuses: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses, ["ok"; 6]);

    let grid = ws.path("grid.conf");
    let out = ws.mandi(&[
        "train",
        "--produce",
        "tomato",
        "--market",
        "MKT000",
        "--q",
        "1",
        "--grid",
        s(&grid),
        "--validation-dates",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let outcome: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(outcome["version"], 1);

    let out = ws.mandi(&["daily-run", "--date", "2016-12-31"]);
    assert_eq!(out.status.code(), Some(1), "missing source file fails the run");
}
