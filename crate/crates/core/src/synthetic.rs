//! Seeded synthetic markets with seasonal prices, used by tests, the
//! acceptance suite and demo fixtures.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{build_panels, DateRange, MarketRecord, MarketRegistry, ObservationRow};
use crate::error::Result;
use crate::eval::DataBundle;
use crate::panel::{Direction, Sample};

#[derive(Debug, Clone)]
pub struct SeasonalSpec {
    pub produce: String,
    pub markets: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    /// Relative amplitude of the yearly cycle.
    pub amplitude: f64,
    pub period_days: f64,
    /// Standard deviation of the multiplicative daily noise.
    pub noise: f64,
    /// Probability that a (market, day) cell is missing.
    pub missing: f64,
    pub seed: u64,
}

impl Default for SeasonalSpec {
    fn default() -> Self {
        Self {
            produce: "tomato".into(),
            markets: 20,
            days: 730,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            amplitude: 0.3,
            period_days: 365.0,
            noise: 0.1,
            missing: 0.2,
            seed: 2017,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeasonalData {
    pub registry: MarketRegistry,
    /// One row per (market, day), present or not; missing cells have empty
    /// price and volume.
    pub rows: Vec<ObservationRow>,
    /// Noise-free prices, `truth[m][t]`.
    pub truth: Vec<Vec<f64>>,
}

pub fn market_id(i: usize) -> String {
    format!("MKT{i:03}")
}

/// Markets on a jittered grid; neighbors share a similar seasonal phase.
pub fn seasonal(spec: &SeasonalSpec) -> SeasonalData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let side = (spec.markets as f64).sqrt().ceil() as usize;
    let mut markets = Vec::with_capacity(spec.markets);
    let mut params = Vec::with_capacity(spec.markets);
    for i in 0..spec.markets {
        let (r, c) = (i / side, i % side);
        let lat = 19.0 + r as f64 * 0.5 + rng.random_range(-0.1..0.1);
        let lon = 83.0 + c as f64 * 0.5 + rng.random_range(-0.1..0.1);
        markets.push(MarketRecord::new(
            &market_id(i),
            &format!("Market {i}"),
            lat,
            lon,
            "Odisha",
        ));
        let base = rng.random_range(1200.0..2400.0);
        let phase = 0.4 * (lat - 19.0) + 0.3 * (lon - 83.0);
        let volume = rng.random_range(5.0..40.0);
        params.push((base, phase, volume));
    }
    let registry = MarketRegistry::new(markets).expect("generated ids are unique");

    let mut rows = Vec::with_capacity(spec.markets * spec.days);
    let mut truth = vec![Vec::with_capacity(spec.days); spec.markets];
    for t in 0..spec.days {
        let date = spec.start_date + Duration::days(t as i64);
        let angle = 2.0 * std::f64::consts::PI * t as f64 / spec.period_days;
        for (m, &(base, phase, vol)) in params.iter().enumerate() {
            let clean = base * (1.0 + spec.amplitude * (angle + phase).sin());
            truth[m].push(clean);
            let price = (clean * (1.0 + noise.sample(&mut rng))).max(1.0);
            let volume =
                (vol * (1.0 - 0.5 * spec.amplitude * (angle + phase).sin()) * (1.0 + noise.sample(&mut rng))).max(0.0);
            let missing = rng.random::<f64>() < spec.missing;
            rows.push(ObservationRow {
                date,
                market_id: registry.markets()[m].market_id.clone(),
                produce: spec.produce.clone(),
                modal_price: (!missing).then_some((price * 100.0).round() / 100.0),
                volume: (!missing).then_some((volume * 1000.0).round() / 1000.0),
            });
        }
    }
    SeasonalData { registry, rows, truth }
}

impl SeasonalData {
    /// Panels for `spec`'s produce and dates, targeting every market.
    pub fn bundle(&self, spec: &SeasonalSpec) -> Result<DataBundle> {
        let (price, volume, _) = build_panels(&self.rows, &spec.produce, spec.start_date, spec.days, &self.registry)?;
        Ok(DataBundle {
            price,
            volume,
            registry: self.registry.clone(),
            target_markets: self.registry.ids(),
        })
    }
}

/// `n` samples of `p` uniform features in `[-1, 1]` spread over three markets.
/// Labels come from a noisy score on the first two features, so every class
/// occurs; prices are positive and loosely tied to the label.
pub fn labelled_samples(n: usize, p: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let day = NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date");
    (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let score = features[0] + 0.5 * features.get(1).copied().unwrap_or(0.0) + rng.random_range(-0.3..0.3);
            let direction = if score > 0.35 {
                Direction::Up
            } else if score < -0.35 {
                Direction::Down
            } else {
                Direction::Flat
            };
            let step = i / 3 + 1;
            let date = day + Duration::days(step as i64);
            Sample {
                market_id: market_id(i % 3),
                step,
                features,
                direction,
                price: 1000.0 + 200.0 * direction.as_i8() as f64 + rng.random_range(0.0..300.0),
                step_dates: DateRange { start: date, end: date },
                window: DateRange { start: date, end: date },
            }
        })
        .collect()
}
