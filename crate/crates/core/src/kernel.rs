//! Forest similarity kernel and the estimators built on it.
//!
//! For a fitted forest of `B` trees, training sample `i` receives weight
//! `(1/B) * sum_b inbag_b(i) / |leaf_b(x)|` whenever it is in-bag in the leaf
//! that `x` reaches in tree `b`. The weights sum to one, so the class
//! posterior, the top-weighted neighbor intervals and the price regression
//! are all plain weighted averages over training samples.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::DateRange;
use crate::error::{Error, Result};
use crate::model::ForestModel;
use crate::panel::{argmax_direction, Direction, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeight {
    pub sample_index: usize,
    pub market_id: String,
    pub step: usize,
    pub step_dates: DateRange,
    /// The `tau` steps the neighbor's features were drawn from.
    pub window: DateRange,
    pub weight: f64,
    pub neighbor_price: f64,
}

/// Nonzero kernel weights of every training sample against `x`, in training
/// order.
pub fn kernel_weights(model: &ForestModel, x: &[f64]) -> Result<Vec<NeighborWeight>> {
    model.check_features(x)?;
    let n = model.training_samples.len();
    let b = model.trees.len() as f64;
    let mut weights = vec![0.0; n];
    for tree in &model.trees {
        let (_, members) = tree.leaf(x);
        let leaf_size: u32 = members.iter().map(|m| m.multiplicity).sum();
        for m in members {
            weights[m.sample as usize] += m.multiplicity as f64 / leaf_size as f64 / b;
        }
    }
    Ok(weights
        .into_iter()
        .enumerate()
        .filter(|(_, w)| *w > 0.0)
        .map(|(i, w)| {
            let s = &model.training_samples[i];
            NeighborWeight {
                sample_index: i,
                market_id: s.market_id.clone(),
                step: s.step,
                step_dates: s.step_dates,
                window: s.window,
                weight: w,
                neighbor_price: s.price,
            }
        })
        .collect())
}

pub fn training_labels(model: &ForestModel) -> Vec<Direction> {
    model.training_samples.iter().map(|s| s.direction).collect()
}

/// Weighted class posterior over `[down, flat, up]`; `labels` is indexed by
/// `sample_index`.
pub fn posterior(weights: &[NeighborWeight], labels: &[Direction]) -> [f64; 3] {
    let mut eta = [0.0; 3];
    for w in weights {
        eta[labels[w.sample_index].index()] += w.weight;
    }
    eta
}

pub fn classify(eta: &[f64; 3]) -> Direction {
    argmax_direction(eta)
}

/// Kernel-weighted average of neighbor prices.
pub fn regress_rfnn(weights: &[NeighborWeight]) -> f64 {
    weights.iter().map(|w| w.weight * w.neighbor_price).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum IntervalMethod {
    TopL { l: usize },
    Threshold { omega: f64 },
}

impl IntervalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            IntervalMethod::TopL { .. } => "top_l",
            IntervalMethod::Threshold { .. } => "threshold",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            IntervalMethod::TopL { l } => l as f64,
            IntervalMethod::Threshold { omega } => omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    /// Threshold selected nothing; the interval is the top neighbor's price.
    pub fallback: bool,
}

impl Interval {
    pub fn contains(&self, price: f64) -> bool {
        self.lower <= price && price <= self.upper
    }

    pub fn is_within(&self, other: &Interval) -> bool {
        other.lower <= self.lower && self.upper <= other.upper
    }
}

/// Neighbors by descending weight, ties by ascending (market_id, step).
pub fn rank_neighbors(neighbors: &[NeighborWeight]) -> Vec<&NeighborWeight> {
    let mut ranked: Vec<&NeighborWeight> = neighbors.iter().collect();
    ranked.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.market_id.cmp(&b.market_id))
            .then(a.step.cmp(&b.step))
    });
    ranked
}

fn span<'a>(it: impl Iterator<Item = &'a NeighborWeight>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| {
        (lo.min(n.neighbor_price), hi.max(n.neighbor_price))
    })
}

/// Price span of the `l` highest-weight neighbors.
pub fn interval_top_l(neighbors: &[NeighborWeight], l: usize) -> Result<Interval> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("neighbor list"));
    }
    if l == 0 {
        return Err(Error::InvalidInput("l must be >= 1".into()));
    }
    let ranked = rank_neighbors(neighbors);
    let (lower, upper) = span(ranked.into_iter().take(l));
    Ok(Interval {
        lower,
        upper,
        method: IntervalMethod::TopL { l },
        fallback: false,
    })
}

/// Price span of neighbors with weight at least `omega`.
pub fn interval_threshold(neighbors: &[NeighborWeight], omega: f64) -> Result<Interval> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("neighbor list"));
    }
    if omega.is_nan() || omega <= 0.0 {
        return Err(Error::InvalidInput("omega must be positive".into()));
    }
    let method = IntervalMethod::Threshold { omega };
    let selected = neighbors.iter().filter(|n| n.weight >= omega);
    if neighbors.iter().any(|n| n.weight >= omega) {
        let (lower, upper) = span(selected);
        return Ok(Interval {
            lower,
            upper,
            method,
            fallback: false,
        });
    }
    let top = rank_neighbors(neighbors)[0];
    Ok(Interval {
        lower: top.neighbor_price,
        upper: top.neighbor_price,
        method,
        fallback: true,
    })
}

/// Splits samples so the most recent `fraction` of each market's steps forms
/// the calibration set. Returns `(fit, calibration)`.
pub fn split_calibration(samples: &[Sample], fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let mut by_market: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for s in samples {
        by_market.entry(&s.market_id).or_default().push(s.step);
    }
    let cutoff: std::collections::HashMap<&str, usize> = by_market
        .into_iter()
        .map(|(m, mut steps)| {
            steps.sort_unstable();
            let n_cal = (fraction * steps.len() as f64).ceil() as usize;
            let first_cal = steps.len().saturating_sub(n_cal);
            (m, steps.get(first_cal).copied().unwrap_or(usize::MAX))
        })
        .collect();
    samples
        .iter()
        .cloned()
        .partition(|s| s.step < cutoff[s.market_id.as_str()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub l: usize,
    pub coverage: f64,
    /// No `l` reached the target coverage; `l` is the largest tried.
    pub flagged: bool,
    /// `coverage_by_l[i]` is the coverage at `l = i + 1`.
    pub coverage_by_l: Vec<f64>,
}

/// Smallest `l` whose top-`l` interval covers the realized price of at least
/// `alpha` of the calibration samples.
pub fn calibrate_l(model: &ForestModel, calibration: &[Sample], alpha: f64) -> Result<Calibration> {
    if calibration.is_empty() {
        return Err(Error::EmptyInput("calibration samples"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
    }
    // first l at which each sample's realized price is covered
    let mut first_cover = Vec::with_capacity(calibration.len());
    let mut max_l = 1;
    for s in calibration {
        let neighbors = kernel_weights(model, &s.features)?;
        let ranked = rank_neighbors(&neighbors);
        max_l = max_l.max(ranked.len());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut hit = None;
        for (i, n) in ranked.iter().enumerate() {
            lo = lo.min(n.neighbor_price);
            hi = hi.max(n.neighbor_price);
            if lo <= s.price && s.price <= hi {
                hit = Some(i + 1);
                break;
            }
        }
        first_cover.push(hit);
    }
    let total = calibration.len() as f64;
    let coverage_by_l: Vec<f64> = (1..=max_l)
        .map(|l| first_cover.iter().filter(|h| h.is_some_and(|h| h <= l)).count() as f64 / total)
        .collect();
    let found = coverage_by_l.iter().position(|&c| c >= alpha);
    Ok(match found {
        Some(i) => Calibration {
            l: i + 1,
            coverage: coverage_by_l[i],
            flagged: false,
            coverage_by_l,
        },
        None => Calibration {
            l: max_l,
            coverage: coverage_by_l[max_l - 1],
            flagged: true,
            coverage_by_l,
        },
    })
}

/// Wire form of one piece of forecast evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub market_id: String,
    pub step_start_date: NaiveDate,
    pub step_end_date: NaiveDate,
    pub window_start_date: NaiveDate,
    pub window_end_date: NaiveDate,
    pub weight: f64,
    pub neighbor_price: f64,
}

/// Evidence sorted by descending weight, optionally truncated to `top_n`.
pub fn evidence(neighbors: &[NeighborWeight], top_n: Option<usize>) -> Vec<EvidenceEntry> {
    rank_neighbors(neighbors)
        .into_iter()
        .take(top_n.unwrap_or(usize::MAX))
        .map(|n| EvidenceEntry {
            market_id: n.market_id.clone(),
            step_start_date: n.step_dates.start,
            step_end_date: n.step_dates.end,
            window_start_date: n.window.start,
            window_end_date: n.window.end,
            weight: n.weight,
            neighbor_price: n.neighbor_price,
        })
        .collect()
}
