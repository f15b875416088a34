//! Time quantization, relative changes, direction labels and sample assembly.
//!
//! Steps are 1-indexed in every public signature: step `s` of a panel with
//! step size `q` covers days `(s-1)q+1 ..= sq` of the dense panel.

use std::cmp::Ordering;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{DateRange, MarketRegistry};
use crate::error::{Error, Result};
use crate::impute::DensePanel;

/// Price-change direction label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Down,
    Flat,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Down, Direction::Flat, Direction::Up];

    /// Position in `[down, flat, up]` probability arrays.
    pub fn index(self) -> usize {
        match self {
            Direction::Down => 0,
            Direction::Flat => 1,
            Direction::Up => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn as_i8(self) -> i8 {
        self.index() as i8 - 1
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Direction::Down),
            0 => Some(Direction::Flat),
            1 => Some(Direction::Up),
            _ => None,
        }
    }

    /// Negative -> down, exactly zero -> flat, positive -> up.
    pub fn of_change(delta: f64) -> Self {
        if delta < 0.0 {
            Direction::Down
        } else if delta > 0.0 {
            Direction::Up
        } else {
            Direction::Flat
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Flat => "flat",
            Direction::Up => "up",
        }
    }
}

/// Probabilities closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Argmax over `[down, flat, up]` with ties resolved flat, then up, then down.
pub fn argmax_direction(probs: &[f64; 3]) -> Direction {
    const PREFERENCE: [Direction; 3] = [Direction::Flat, Direction::Up, Direction::Down];
    let mut best = PREFERENCE[0];
    for &d in &PREFERENCE[1..] {
        if probs[d.index()] > probs[best.index()] + TIE_TOLERANCE {
            best = d;
        }
    }
    best
}

/// Dense panel averaged over non-overlapping blocks of `q` days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedPanel {
    pub produce: String,
    pub markets: Vec<String>,
    pub q: usize,
    /// First day of step 1.
    pub start_date: NaiveDate,
    pub num_steps: usize,
    values: Vec<f64>,
}

impl QuantizedPanel {
    pub fn num_markets(&self) -> usize {
        self.markets.len()
    }

    /// Value at 1-indexed step `s`.
    pub fn get(&self, m: usize, s: usize) -> f64 {
        debug_assert!(s >= 1 && s <= self.num_steps);
        self.values[m * self.num_steps + s - 1]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.num_steps..(m + 1) * self.num_steps]
    }

    pub fn market_index(&self, market_id: &str) -> Option<usize> {
        self.markets.iter().position(|m| m == market_id)
    }

    /// Calendar days covered by step `s`; defined past the last step too, for
    /// forecast targets.
    pub fn step_dates(&self, s: usize) -> DateRange {
        let start = self.start_date + Duration::days(((s - 1) * self.q) as i64);
        DateRange {
            start,
            end: start + Duration::days(self.q as i64 - 1),
        }
    }

    /// Days covered by steps `s - tau ..= s - 1`.
    pub fn window_dates(&self, s: usize, tau: usize) -> DateRange {
        DateRange {
            start: self.step_dates(s - tau).start,
            end: self.step_dates(s - 1).end,
        }
    }

    fn same_axes(&self, other: &QuantizedPanel) -> bool {
        self.markets == other.markets
            && self.q == other.q
            && self.start_date == other.start_date
            && self.num_steps == other.num_steps
    }
}

pub fn quantize(dense: &DensePanel, q: usize) -> Result<QuantizedPanel> {
    if q == 0 {
        return Err(Error::InvalidInput("q must be >= 1".into()));
    }
    if dense.num_days < q {
        return Err(Error::InvalidInput(format!(
            "panel has {} days, fewer than q = {q}",
            dense.num_days
        )));
    }
    let steps = dense.num_days / q;
    let mut values = Vec::with_capacity(dense.num_markets() * steps);
    for m in 0..dense.num_markets() {
        let row = dense.row(m);
        values.extend(
            row.chunks_exact(q)
                .take(steps)
                .map(|block| block.iter().sum::<f64>() / q as f64),
        );
    }
    Ok(QuantizedPanel {
        produce: dense.produce.clone(),
        markets: dense.markets.clone(),
        q,
        start_date: dense.start_date,
        num_steps: steps,
        values,
    })
}

/// Relative change per step; the first step of every market is zero.
pub fn relative_changes(qp: &QuantizedPanel) -> Vec<Vec<f64>> {
    (0..qp.num_markets()).map(|m| relative_changes_row(qp.row(m))).collect()
}

pub fn directions(delta: &[Vec<f64>]) -> Vec<Vec<Direction>> {
    delta
        .iter()
        .map(|row| row.iter().map(|&d| Direction::of_change(d)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSelection {
    /// Nearest first; always starts with the queried market.
    pub markets: Vec<String>,
    /// Markets skipped for lacking coordinates.
    pub excluded: Vec<String>,
}

/// The `k` markets closest to `market_id` in plain Euclidean (lat, lon)
/// distance, the market itself included. Ties go to the smaller market id.
pub fn neighbor_markets(registry: &MarketRegistry, market_id: &str, k: usize) -> Result<NeighborSelection> {
    let target = registry
        .get(market_id)
        .ok_or_else(|| Error::UnknownMarket(market_id.to_string()))?;
    if k == 0 || k > registry.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} must lie in 1..={}",
            registry.len()
        )));
    }
    let excluded: Vec<String> = registry
        .markets()
        .iter()
        .filter(|m| m.coordinates().is_none())
        .map(|m| m.market_id.clone())
        .collect();
    let Some((lat0, lon0)) = target.coordinates() else {
        return Ok(NeighborSelection {
            markets: vec![market_id.to_string()],
            excluded,
        });
    };
    let mut ranked: Vec<(f64, &str)> = registry
        .markets()
        .iter()
        .filter_map(|m| {
            let (lat, lon) = m.coordinates()?;
            let dist = if m.market_id == market_id {
                0.0
            } else {
                ((lat - lat0).powi(2) + (lon - lon0).powi(2)).sqrt()
            };
            Some((dist, m.market_id.as_str()))
        })
        .collect();
    ranked.sort_by(|a, b| {
        // self first even when another market shares its coordinates
        let self_a = a.1 == market_id;
        let self_b = b.1 == market_id;
        self_b
            .cmp(&self_a)
            .then(a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
            .then(a.1.cmp(b.1))
    });
    Ok(NeighborSelection {
        markets: ranked.into_iter().take(k).map(|(_, id)| id.to_string()).collect(),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub tau: usize,
    pub k: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { tau: 10, k: 1 }
    }
}

/// One training or evaluation example at (market, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub market_id: String,
    pub step: usize,
    /// `tau` relative changes then `tau` volumes, oldest first.
    pub features: Vec<f64>,
    pub direction: Direction,
    /// Quantized price at this step, Rs per 100 kg.
    pub price: f64,
    pub step_dates: DateRange,
    pub window: DateRange,
}

impl Sample {
    /// Last calendar day whose data feeds this sample (its label step).
    pub fn latest_date(&self) -> NaiveDate {
        self.step_dates.end
    }
}

fn feature_vector(delta_row: &[f64], volume_qp: &QuantizedPanel, m: usize, s: usize, tau: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * tau);
    x.extend_from_slice(&delta_row[s - 1 - tau..s - 1]);
    x.extend_from_slice(&volume_qp.row(m)[s - 1 - tau..s - 1]);
    x
}

fn check_pair(price_qp: &QuantizedPanel, volume_qp: &QuantizedPanel, tau: usize) -> Result<()> {
    if !price_qp.same_axes(volume_qp) {
        return Err(Error::InvalidInput(
            "price and volume panels have different axes".into(),
        ));
    }
    if tau == 0 {
        return Err(Error::InvalidInput("tau must be >= 1".into()));
    }
    Ok(())
}

/// Samples at steps `tau+1 ..= S` for every market near `target_market`.
pub fn build_samples(
    price_qp: &QuantizedPanel,
    volume_qp: &QuantizedPanel,
    target_market: &str,
    config: &FeatureConfig,
    registry: &MarketRegistry,
) -> Result<Vec<Sample>> {
    check_pair(price_qp, volume_qp, config.tau)?;
    let neighbors = neighbor_markets(registry, target_market, config.k)?;
    let tau = config.tau;
    if price_qp.num_steps <= tau {
        tracing::warn!(steps = price_qp.num_steps, tau, "not enough steps to build any sample");
        return Ok(Vec::new());
    }
    let mut samples = Vec::with_capacity(neighbors.markets.len() * (price_qp.num_steps - tau));
    for id in &neighbors.markets {
        let m = price_qp
            .market_index(id)
            .ok_or_else(|| Error::UnknownMarket(id.clone()))?;
        let delta = relative_changes_row(price_qp.row(m));
        for s in tau + 1..=price_qp.num_steps {
            samples.push(Sample {
                market_id: id.clone(),
                step: s,
                features: feature_vector(&delta, volume_qp, m, s, tau),
                direction: Direction::of_change(delta[s - 1]),
                price: price_qp.get(m, s),
                step_dates: price_qp.step_dates(s),
                window: price_qp.window_dates(s, tau),
            });
        }
    }
    Ok(samples)
}

fn relative_changes_row(row: &[f64]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(row.windows(2).map(|w| (w[1] - w[0]) / w[0]))
        .collect()
}

/// Features for predicting step `as_of_step` from steps `s - tau ..= s - 1`.
/// `as_of_step` may be one past the last step (the next, unseen step).
pub fn build_test_vector(
    price_qp: &QuantizedPanel,
    volume_qp: &QuantizedPanel,
    market_id: &str,
    config: &FeatureConfig,
    as_of_step: usize,
) -> Result<Vec<f64>> {
    check_pair(price_qp, volume_qp, config.tau)?;
    if as_of_step < config.tau + 1 {
        return Err(Error::InsufficientHistory {
            needed: config.tau + 1,
            got: as_of_step,
        });
    }
    if as_of_step > price_qp.num_steps + 1 {
        return Err(Error::InvalidInput(format!(
            "step {as_of_step} is beyond the next step {}",
            price_qp.num_steps + 1
        )));
    }
    let m = price_qp
        .market_index(market_id)
        .ok_or_else(|| Error::UnknownMarket(market_id.to_string()))?;
    let delta = relative_changes_row(price_qp.row(m));
    Ok(feature_vector(&delta, volume_qp, m, as_of_step, config.tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MarketRecord;

    fn d0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2017, 1, 1).unwrap()
    }

    fn dense(rows: &[&[f64]]) -> DensePanel {
        let t = rows[0].len();
        DensePanel::new(
            "x",
            (0..rows.len()).map(|i| format!("m{i}")).collect(),
            d0(),
            t,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn block_means() {
        let qp = quantize(&dense(&[&[10.0, 12.0, 11.0, 13.0, 15.0, 14.0]]), 2).unwrap();
        assert_eq!(qp.row(0), &[11.0, 12.0, 14.5]);
        assert_eq!(qp.step_dates(2).start, d0() + Duration::days(2));
        assert_eq!(qp.step_dates(2).end, d0() + Duration::days(3));
    }

    #[test]
    fn q_one_is_identity() {
        let row = [3.0, 1.5, 2.25, 9.0];
        assert_eq!(quantize(&dense(&[&row]), 1).unwrap().row(0), &row);
    }

    #[test]
    fn trailing_partial_block_dropped() {
        let qp = quantize(&dense(&[&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 100.0]]), 2).unwrap();
        assert_eq!(qp.num_steps, 3);
        assert_eq!(qp.row(0), &[1.5, 3.5, 5.5]);
        assert!(quantize(&dense(&[&[1.0]]), 2).is_err());
    }

    fn qrow(row: &[f64]) -> QuantizedPanel {
        quantize(&dense(&[row]), 1).unwrap()
    }

    #[test]
    fn relative_change_examples() {
        let d = relative_changes(&qrow(&[100.0, 110.0, 99.0]));
        approx::assert_abs_diff_eq!(d[0][0], 0.0);
        approx::assert_abs_diff_eq!(d[0][1], 0.10, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(d[0][2], -0.10, epsilon = 1e-12);
        assert_eq!(relative_changes(&qrow(&[7.0; 4]))[0], vec![0.0; 4]);
        assert_eq!(relative_changes(&qrow(&[50.0, 100.0]))[0], vec![0.0, 1.0]);
    }

    #[test]
    fn sign_mapping() {
        use Direction::*;
        assert_eq!(directions(&[vec![0.0, 0.10, -0.10]]), vec![vec![Flat, Up, Down]]);
        assert_eq!(directions(&[vec![0.0; 3]]), vec![vec![Flat; 3]]);
        assert_eq!(directions(&[vec![1e-12]]), vec![vec![Up]]);
        assert_eq!(Up.as_i8(), 1);
        assert_eq!(Direction::from_i8(-1), Some(Down));
    }

    #[test]
    fn argmax_ties() {
        use Direction::*;
        assert_eq!(argmax_direction(&[0.2, 0.3, 0.5]), Up);
        assert_eq!(argmax_direction(&[0.5, 0.0, 0.5]), Up);
        assert_eq!(argmax_direction(&[0.4, 0.4, 0.2]), Flat);
        assert_eq!(argmax_direction(&[1.0 / 3.0; 3]), Flat);
        assert_eq!(argmax_direction(&[0.6, 0.2, 0.2]), Down);
    }

    fn line_registry(coords: &[(&str, f64, f64)]) -> MarketRegistry {
        MarketRegistry::new(
            coords
                .iter()
                .map(|&(id, lat, lon)| MarketRecord::new(id, id, lat, lon, "s"))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_markets() {
        let reg = line_registry(&[("a", 0.0, 0.0), ("b", 0.0, 1.0), ("c", 0.0, 3.0)]);
        assert_eq!(neighbor_markets(&reg, "a", 2).unwrap().markets, vec!["a", "b"]);
        assert_eq!(neighbor_markets(&reg, "c", 1).unwrap().markets, vec!["c"]);
        assert_eq!(neighbor_markets(&reg, "b", 3).unwrap().markets.len(), 3);
        assert!(neighbor_markets(&reg, "zz", 1).is_err());
        assert!(neighbor_markets(&reg, "a", 4).is_err());
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_id() {
        let reg = line_registry(&[("m", 0.0, 0.0), ("z", 0.0, 1.0), ("b", 1.0, 0.0)]);
        assert_eq!(neighbor_markets(&reg, "m", 2).unwrap().markets, vec!["m", "b"]);
    }

    #[test]
    fn markets_without_coordinates_are_excluded() {
        let mut markets = vec![
            MarketRecord::new("a", "a", 0.0, 0.0, "s"),
            MarketRecord::new("b", "b", 0.0, 5.0, "s"),
        ];
        markets.push(MarketRecord {
            latitude: None,
            longitude: None,
            ..MarketRecord::new("c", "c", 0.0, 0.0, "s")
        });
        let reg = MarketRegistry::new(markets).unwrap();
        let sel = neighbor_markets(&reg, "a", 3).unwrap();
        assert_eq!(sel.markets, vec!["a", "b"]);
        assert_eq!(sel.excluded, vec!["c"]);
    }

    fn pair(prices: &[&[f64]], volumes: &[&[f64]]) -> (QuantizedPanel, QuantizedPanel) {
        (
            quantize(&dense(prices), 1).unwrap(),
            quantize(&dense(volumes), 1).unwrap(),
        )
    }

    #[test]
    fn sample_layout_and_labels() {
        // prices chosen so that delta = [0, .1, -.1, .2] up to rounding
        let prices = [100.0, 110.0, 99.0, 118.8];
        let (p, v) = pair(&[&prices], &[&[5.0, 6.0, 7.0, 8.0]]);
        let reg = line_registry(&[("m0", 0.0, 0.0)]);
        let cfg = FeatureConfig { tau: 2, k: 1 };
        let samples = build_samples(&p, &v, "m0", &cfg, &reg).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].step, 3);
        let x = &samples[0].features;
        approx::assert_abs_diff_eq!(x[0], 0.0);
        approx::assert_abs_diff_eq!(x[1], 0.1, epsilon = 1e-12);
        assert_eq!(&x[2..], &[5.0, 6.0]);
        assert_eq!(samples[0].direction, Direction::Down);
        assert_eq!(samples[0].price, 99.0);
        assert_eq!(samples[1].direction, Direction::Up);
        assert_eq!(samples[0].window.start, d0());
        assert_eq!(samples[0].window.end, d0() + Duration::days(1));
        assert_eq!(samples[0].latest_date(), d0() + Duration::days(2));

        let test = build_test_vector(&p, &v, "m0", &cfg, 3).unwrap();
        assert_eq!(&test, x);
        assert!(matches!(
            build_test_vector(&p, &v, "m0", &cfg, 2),
            Err(Error::InsufficientHistory { .. })
        ));
        // the unseen next step uses the last tau observed steps
        let next = build_test_vector(&p, &v, "m0", &cfg, 5).unwrap();
        assert_eq!(&next[2..], &[7.0, 8.0]);
    }

    #[test]
    fn sample_counts() {
        let row: Vec<f64> = (0..12).map(|i| 100.0 + i as f64).collect();
        let (p, v) = pair(&[&row, &row, &row], &[&row, &row, &row]);
        let reg = line_registry(&[("m0", 0.0, 0.0), ("m1", 0.0, 1.0), ("m2", 0.0, 2.0)]);
        let cfg = FeatureConfig { tau: 10, k: 3 };
        assert_eq!(build_samples(&p, &v, "m1", &cfg, &reg).unwrap().len(), 6);
        let short = FeatureConfig { tau: 12, k: 3 };
        assert!(build_samples(&p, &v, "m1", &short, &reg).unwrap().is_empty());
    }
}
