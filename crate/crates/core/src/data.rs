//! Market registry, observation rows and the sparse market-by-day panels
//! built from them.
//!
//! Prices are carried in Rs per 100 kg (one quintal) throughout; volumes in
//! metric tons.

use std::collections::HashMap;
use std::io::Read;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBSERVATION_HEADER: [&str; 5] = [
    "date",
    "market_id",
    "produce",
    "modal_price_rs_per_quintal",
    "volume_tonnes",
];

pub const REGISTRY_HEADER: [&str; 5] = ["market_id", "name", "latitude", "longitude", "state"];

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketRecord {
    pub market_id: String,
    pub name: String,
    /// Missing coordinates exclude the market from neighbor selection.
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub state: String,
}

impl MarketRecord {
    pub fn new(market_id: &str, name: &str, latitude: f64, longitude: f64, state: &str) -> Self {
        Self {
            market_id: market_id.to_string(),
            name: name.to_string(),
            latitude: Some(latitude),
            longitude: Some(longitude),
            state: state.to_string(),
        }
    }

    pub fn coordinates(&self) -> Option<(f64, f64)> {
        Some((self.latitude?, self.longitude?))
    }
}

/// Ordered set of markets with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketRegistry {
    markets: Vec<MarketRecord>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl MarketRegistry {
    pub fn new(markets: Vec<MarketRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(markets.len());
        for (i, m) in markets.iter().enumerate() {
            if let Some(lat) = m.latitude {
                if !(-90.0..=90.0).contains(&lat) {
                    return Err(Error::InvalidInput(format!(
                        "market {}: latitude {lat} out of range",
                        m.market_id
                    )));
                }
            }
            if let Some(lon) = m.longitude {
                if !(-180.0..=180.0).contains(&lon) {
                    return Err(Error::InvalidInput(format!(
                        "market {}: longitude {lon} out of range",
                        m.market_id
                    )));
                }
            }
            if index.insert(m.market_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate market_id {}", m.market_id)));
            }
        }
        Ok(Self { markets, index })
    }

    /// Parses the registry CSV (`market_id,name,latitude,longitude,state`).
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        check_header(records.next(), &REGISTRY_HEADER)?;
        let mut markets = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != REGISTRY_HEADER.len() {
                return Err(parse_err(line, format!("expected 5 fields, got {}", rec.len())));
            }
            let coord = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.trim().is_empty() {
                    return Ok(None);
                }
                s.trim()
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| parse_err(line, format!("bad {what} `{s}`")))
            };
            markets.push(MarketRecord {
                market_id: rec[0].to_string(),
                name: rec[1].to_string(),
                latitude: coord(&rec[2], "latitude")?,
                longitude: coord(&rec[3], "longitude")?,
                state: rec[4].to_string(),
            });
        }
        Self::new(markets)
    }

    pub fn to_csv(&self) -> String {
        let mut out = REGISTRY_HEADER.join(",");
        out.push('\n');
        for m in &self.markets {
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.market_id,
                m.name,
                f(m.latitude),
                f(m.longitude),
                m.state
            ));
        }
        out
    }

    pub fn markets(&self) -> &[MarketRecord] {
        &self.markets
    }

    pub fn len(&self) -> usize {
        self.markets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markets.is_empty()
    }

    pub fn position(&self, market_id: &str) -> Option<usize> {
        if self.index.len() != self.markets.len() {
            // deserialized registries skip the index
            return self.markets.iter().position(|m| m.market_id == market_id);
        }
        self.index.get(market_id).copied()
    }

    pub fn get(&self, market_id: &str) -> Option<&MarketRecord> {
        self.position(market_id).map(|i| &self.markets[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.markets.iter().map(|m| m.market_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub date: NaiveDate,
    pub market_id: String,
    pub produce: String,
    pub modal_price: Option<f64>,
    pub volume: Option<f64>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn check_header(first: Option<std::result::Result<csv::StringRecord, csv::Error>>, expected: &[&str]) -> Result<()> {
    let header = match first {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        None => return Err(parse_err(1, "missing header")),
    };
    if header.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            1,
            format!(
                "malformed header `{}`, expected `{}`",
                header.iter().collect::<Vec<_>>().join(","),
                expected.join(",")
            ),
        ));
    }
    Ok(())
}

/// Parses the ingestion CSV. Rows come back in file order; any invalid line
/// rejects the whole input with its 1-based line number.
pub fn parse_observations<R: Read>(reader: R) -> Result<Vec<ObservationRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    check_header(records.next(), &OBSERVATION_HEADER)?;

    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != OBSERVATION_HEADER.len() {
            return Err(parse_err(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], DATE_FORMAT)
            .map_err(|_| parse_err(line, format!("unparseable date `{}`", &rec[0])))?;
        let number = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(line, format!("unparseable {what} `{s}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {what}")));
            }
            Ok(Some(v))
        };
        let modal_price = number(&rec[3], "price")?;
        if let Some(p) = modal_price {
            if p <= 0.0 {
                return Err(parse_err(line, format!("price must be positive, got {p}")));
            }
        }
        let volume = number(&rec[4], "volume")?;
        if let Some(v) = volume {
            if v < 0.0 {
                return Err(parse_err(line, format!("volume must be non-negative, got {v}")));
            }
        }
        rows.push(ObservationRow {
            date,
            market_id: rec[1].to_string(),
            produce: rec[2].to_string(),
            modal_price,
            volume,
        });
    }
    Ok(rows)
}

/// Writes rows back out in the ingestion CSV format.
pub fn write_observations(rows: &[ObservationRow]) -> String {
    let mut out = OBSERVATION_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.date.format(DATE_FORMAT),
            r.market_id,
            r.produce,
            f(r.modal_price),
            f(r.volume)
        ));
    }
    out
}

/// Inclusive calendar date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Market-by-day grid with missing entries, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePanel {
    pub produce: String,
    pub markets: Vec<String>,
    pub start_date: NaiveDate,
    pub num_days: usize,
    values: Vec<Option<f64>>,
}

impl SparsePanel {
    pub fn new(
        produce: &str,
        markets: Vec<String>,
        start_date: NaiveDate,
        num_days: usize,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        if markets.is_empty() || num_days == 0 {
            return Err(Error::InvalidInput("panel needs M >= 1 and T >= 1".into()));
        }
        if values.len() != markets.len() * num_days {
            return Err(Error::InvalidInput(format!(
                "panel has {} cells, expected {}x{}",
                values.len(),
                markets.len(),
                num_days
            )));
        }
        Ok(Self {
            produce: produce.to_string(),
            markets,
            start_date,
            num_days,
            values,
        })
    }

    pub fn empty(produce: &str, markets: Vec<String>, start_date: NaiveDate, num_days: usize) -> Result<Self> {
        let n = markets.len() * num_days;
        Self::new(produce, markets, start_date, num_days, vec![None; n])
    }

    pub fn num_markets(&self) -> usize {
        self.markets.len()
    }

    pub fn get(&self, m: usize, t: usize) -> Option<f64> {
        self.values[m * self.num_days + t]
    }

    pub fn set(&mut self, m: usize, t: usize, v: Option<f64>) {
        self.values[m * self.num_days + t] = v;
    }

    pub fn row(&self, m: usize) -> &[Option<f64>] {
        &self.values[m * self.num_days..(m + 1) * self.num_days]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.start_date + Duration::days(t as i64)
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start_date).num_days();
        (d >= 0 && (d as usize) < self.num_days).then_some(d as usize)
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date(self.num_days - 1)
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn market_index(&self, market_id: &str) -> Option<usize> {
        self.markets.iter().position(|m| m == market_id)
    }

    /// Days `[from, from + len)` as a new panel.
    pub fn slice_days(&self, from: usize, len: usize) -> Result<Self> {
        if len == 0 || from + len > self.num_days {
            return Err(Error::InvalidInput(format!(
                "day slice {from}+{len} outside panel of {} days",
                self.num_days
            )));
        }
        let mut values = Vec::with_capacity(self.markets.len() * len);
        for m in 0..self.markets.len() {
            values.extend_from_slice(&self.row(m)[from..from + len]);
        }
        Self::new(&self.produce, self.markets.clone(), self.date(from), len, values)
    }

    /// Flattens present cells back to `(market_id, date, value)` triples.
    pub fn present_cells(&self) -> Vec<(String, NaiveDate, f64)> {
        let mut out = Vec::new();
        for (m, id) in self.markets.iter().enumerate() {
            for t in 0..self.num_days {
                if let Some(v) = self.get(m, t) {
                    out.push((id.clone(), self.date(t), v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_used: usize,
    /// Rows naming a market that is not in the registry.
    pub skipped: usize,
    pub out_of_range: usize,
    pub other_produce: usize,
    pub duplicates_overwritten: usize,
    pub unknown_markets: Vec<String>,
}

/// Places rows for `produce` onto price and volume panels over
/// `[start_date, start_date + num_days)`. Duplicate (market, date) rows keep
/// the last occurrence.
pub fn build_panels(
    rows: &[ObservationRow],
    produce: &str,
    start_date: NaiveDate,
    num_days: usize,
    registry: &MarketRegistry,
) -> Result<(SparsePanel, SparsePanel, IngestReport)> {
    if num_days == 0 {
        return Err(Error::InvalidInput("num_days must be >= 1".into()));
    }
    if registry.is_empty() {
        return Err(Error::InvalidInput("market registry is empty".into()));
    }
    let ids = registry.ids();
    let mut price = SparsePanel::empty(produce, ids.clone(), start_date, num_days)?;
    let mut volume = SparsePanel::empty(produce, ids, start_date, num_days)?;
    let mut report = IngestReport::default();
    let mut seen = std::collections::HashSet::new();

    for row in rows {
        if row.produce != produce {
            report.other_produce += 1;
            continue;
        }
        let Some(m) = registry.position(&row.market_id) else {
            report.skipped += 1;
            if !report.unknown_markets.contains(&row.market_id) {
                report.unknown_markets.push(row.market_id.clone());
            }
            continue;
        };
        let Some(t) = price.day_index(row.date) else {
            report.out_of_range += 1;
            continue;
        };
        if !seen.insert((m, t)) {
            report.duplicates_overwritten += 1;
        } else {
            report.rows_used += 1;
        }
        price.set(m, t, row.modal_price);
        volume.set(m, t, row.volume);
    }
    Ok((price, volume, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierPolicy {
    /// Allowed multiplicative deviation from the trailing median.
    pub ratio: f64,
    pub window_days: usize,
    pub min_support: usize,
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        Self {
            ratio: 10.0,
            window_days: 30,
            min_support: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedCell {
    pub market_id: String,
    pub date: NaiveDate,
    pub value: f64,
    pub trailing_median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub removed: Vec<RemovedCell>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Drops prices that sit outside `[median / ratio, median * ratio]` of the
/// market's trailing window. Comparison medians come from the input panel, so
/// the result does not depend on scan order.
pub fn clean_outliers(panel: &SparsePanel, policy: &OutlierPolicy) -> (SparsePanel, CleanReport) {
    let mut out = panel.clone();
    let mut report = CleanReport::default();
    let mut window = Vec::with_capacity(policy.window_days);
    for m in 0..panel.num_markets() {
        let row = panel.row(m);
        for t in 0..panel.num_days {
            let Some(v) = row[t] else { continue };
            window.clear();
            let lo = t.saturating_sub(policy.window_days);
            window.extend(row[lo..t].iter().flatten().copied());
            if window.len() < policy.min_support {
                continue;
            }
            let med = median(&mut window);
            if v < med / policy.ratio || v > med * policy.ratio {
                out.set(m, t, None);
                report.removed.push(RemovedCell {
                    market_id: panel.markets[m].clone(),
                    date: panel.date(t),
                    value: v,
                    trailing_median: med,
                });
            }
        }
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    const HEADER: &str = "date,market_id,produce,modal_price_rs_per_quintal,volume_tonnes\n";

    #[test]
    fn parses_full_row() {
        let csv = format!("{HEADER}2017-01-05,BANKI,tomato,950,2.4\n");
        let rows = parse_observations(csv.as_bytes()).unwrap();
        assert_eq!(
            rows,
            vec![ObservationRow {
                date: d("2017-01-05"),
                market_id: "BANKI".into(),
                produce: "tomato".into(),
                modal_price: Some(950.0),
                volume: Some(2.4),
            }]
        );
    }

    #[test]
    fn empty_cells_are_absent() {
        let csv = format!("{HEADER}2017-01-05,BANKI,tomato,,\n");
        let rows = parse_observations(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].modal_price, None);
        assert_eq!(rows[0].volume, None);
    }

    #[test]
    fn negative_price_rejected_with_line() {
        let csv = format!("{HEADER}2017-01-04,BANKI,tomato,900,1\n2017-01-05,BANKI,tomato,-5,1\n");
        match parse_observations(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_and_date() {
        let bad = "date,market,produce,price,volume\n";
        assert!(matches!(
            parse_observations(bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let csv = format!("{HEADER}2017-13-05,BANKI,tomato,950,2.4\n");
        assert!(matches!(
            parse_observations(csv.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let csv = format!("{HEADER}2017-01-05,BANKI,tomato,950,-1\n");
        assert!(matches!(
            parse_observations(csv.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn rows_round_trip_through_writer() {
        let csv = format!("{HEADER}2017-01-05,BANKI,tomato,950,2.4\n2017-01-06,BANKI,onion,,3\n");
        let rows = parse_observations(csv.as_bytes()).unwrap();
        assert_eq!(write_observations(&rows), csv);
    }

    fn registry(ids: &[&str]) -> MarketRegistry {
        MarketRegistry::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| MarketRecord::new(id, id, 20.0, 80.0 + i as f64, "Odisha"))
                .collect(),
        )
        .unwrap()
    }

    fn obs(date: &str, market: &str, price: f64) -> ObservationRow {
        ObservationRow {
            date: d(date),
            market_id: market.into(),
            produce: "tomato".into(),
            modal_price: Some(price),
            volume: Some(1.0),
        }
    }

    #[test]
    fn places_rows_by_day() {
        let rows = vec![obs("2017-01-01", "A", 100.0), obs("2017-01-03", "A", 120.0)];
        let (p, v, rep) = build_panels(&rows, "tomato", d("2017-01-01"), 3, &registry(&["A"])).unwrap();
        assert_eq!(p.row(0), &[Some(100.0), None, Some(120.0)]);
        assert_eq!(v.row(0), &[Some(1.0), None, Some(1.0)]);
        assert_eq!(rep.rows_used, 2);
    }

    #[test]
    fn duplicate_rows_keep_last() {
        let rows = vec![obs("2017-01-01", "A", 100.0), obs("2017-01-01", "A", 110.0)];
        let (p, _, rep) = build_panels(&rows, "tomato", d("2017-01-01"), 1, &registry(&["A"])).unwrap();
        assert_eq!(p.get(0, 0), Some(110.0));
        assert_eq!(rep.duplicates_overwritten, 1);
    }

    #[test]
    fn unknown_market_is_skipped() {
        let rows = vec![obs("2017-01-01", "ZZZ", 100.0)];
        let (p, _, rep) = build_panels(&rows, "tomato", d("2017-01-01"), 2, &registry(&["A"])).unwrap();
        assert_eq!(p.observed_count(), 0);
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.unknown_markets, vec!["ZZZ".to_string()]);
    }

    fn series(values: &[f64]) -> SparsePanel {
        SparsePanel::new(
            "tomato",
            vec!["A".into()],
            d("2017-01-01"),
            values.len(),
            values.iter().map(|&v| Some(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn spike_is_removed() {
        let (out, rep) = clean_outliers(&series(&[100.0, 102.0, 98.0, 5000.0]), &OutlierPolicy::default());
        assert_eq!(out.row(0), &[Some(100.0), Some(102.0), Some(98.0), None]);
        assert_eq!(rep.removed.len(), 1);
        assert_eq!(rep.removed[0].trailing_median, 100.0);
        assert_eq!(rep.removed[0].date, d("2017-01-04"));
    }

    #[test]
    fn stable_series_unchanged() {
        let p = series(&[100.0, 102.0, 98.0, 101.0]);
        let (out, rep) = clean_outliers(&p, &OutlierPolicy::default());
        assert_eq!(out, p);
        assert!(rep.removed.is_empty());
    }

    #[test]
    fn short_history_is_kept() {
        let p = series(&[100.0, 5000.0]);
        let (out, _) = clean_outliers(&p, &OutlierPolicy::default());
        assert_eq!(out, p);
    }

    #[test]
    fn registry_rejects_duplicates_and_bad_coordinates() {
        let a = MarketRecord::new("A", "a", 10.0, 10.0, "s");
        assert!(MarketRegistry::new(vec![a.clone(), a.clone()]).is_err());
        let bad = MarketRecord::new("B", "b", 91.0, 10.0, "s");
        assert!(MarketRegistry::new(vec![bad]).is_err());
    }

    #[test]
    fn registry_csv_round_trip() {
        let csv = "market_id,name,latitude,longitude,state\nBANKI,Banki,20.37,85.53,Odisha\nX,Nowhere,,,\n";
        let reg = MarketRegistry::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("X").unwrap().coordinates(), None);
        assert_eq!(reg.to_csv(), csv);
    }
}
