//! Accuracy metrics, walk-forward cross-validation and hyperparameter sweeps.
//!
//! A validation date `t` trains only on days strictly before `t`: panels are
//! cut at `t - 1`, re-imputed, quantized so the last step ends on `t - 1`, and
//! every training sample's provenance is checked against `t` before fitting.

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MarketRegistry, SparsePanel};
use crate::error::{Error, Result};
use crate::impute::{soft_impute, DensePanel, ImputeConfig};
use crate::model::{fit_forest, fit_logistic, ForestParams, LogisticParams};
use crate::panel::{build_samples, build_test_vector, quantize, Direction, FeatureConfig, Sample};

fn check_lengths<T, U>(a: &[T], b: &[U]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} truths vs {} predictions",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn raw_accuracy(truth: &[Direction], pred: &[Direction]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy restricted to each class, `None` for classes absent from truth.
pub fn per_class_accuracy(truth: &[Direction], pred: &[Direction]) -> Result<[Option<f64>; 3]> {
    check_lengths(truth, pred)?;
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (t, p) in truth.iter().zip(pred) {
        totals[t.index()] += 1;
        if t == p {
            hits[t.index()] += 1;
        }
    }
    Ok(std::array::from_fn(|c| {
        (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64)
    }))
}

/// Mean of per-class accuracies over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[Direction], pred: &[Direction]) -> Result<f64> {
    let per_class = per_class_accuracy(truth, pred)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Root mean squared error of prices given in Rs per 100 kg, reported in
/// Rs per kg.
pub fn rmse(truth_prices: &[f64], pred_prices: &[f64]) -> Result<f64> {
    check_lengths(truth_prices, pred_prices)?;
    let mse = truth_prices
        .iter()
        .zip(pred_prices)
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / truth_prices.len() as f64;
    Ok(mse.sqrt() / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub raw_accuracy: f64,
    pub balanced_accuracy: f64,
    /// Rs per kg; present when price predictions were supplied.
    pub rmse: Option<f64>,
    pub per_class_accuracy: [Option<f64>; 3],
    pub n_predictions: usize,
}

impl EvalReport {
    pub fn new(truth: &[Direction], pred: &[Direction], prices: Option<(&[f64], &[f64])>) -> Result<Self> {
        Ok(Self {
            raw_accuracy: raw_accuracy(truth, pred)?,
            balanced_accuracy: balanced_accuracy(truth, pred)?,
            rmse: prices.map(|(t, p)| rmse(t, p)).transpose()?,
            per_class_accuracy: per_class_accuracy(truth, pred)?,
            n_predictions: truth.len(),
        })
    }
}

/// Everything the walk-forward harness reads.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub price: SparsePanel,
    pub volume: SparsePanel,
    pub registry: MarketRegistry,
    pub target_markets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classifier {
    Forest,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub max_rank: usize,
    pub k: usize,
    pub c: f64,
    pub num_trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub max_rank: Vec<usize>,
    pub k: Vec<usize>,
    pub c: Vec<f64>,
    pub num_trees: Vec<usize>,
}

impl Grid {
    /// Row-major product with `num_trees` varying fastest.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        for &max_rank in &self.max_rank {
            for &k in &self.k {
                for &c in &self.c {
                    for &num_trees in &self.num_trees {
                        out.push(Candidate {
                            max_rank,
                            k,
                            c,
                            num_trees,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn size(&self) -> usize {
        self.max_rank.len() * self.k.len() * self.c.len() * self.num_trees.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub t1: NaiveDate,
    pub t2: NaiveDate,
    pub q: usize,
    pub tau: usize,
    pub grid: Grid,
    pub classifier: Classifier,
    /// Base settings; `max_rank` comes from the candidate.
    pub impute: ImputeConfig,
    /// Base settings; `num_trees` comes from the candidate.
    pub forest: ForestParams,
    /// Base settings; `c` comes from the candidate.
    pub logistic: LogisticParams,
    /// Impute once on all data instead of per fold. Faster, but the imputed
    /// training panel then sees the future; results are approximate.
    pub frozen_imputation: bool,
    /// Extends every training cut this many days past the validation date.
    /// Only for exercising the lookahead check.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub leak_days: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl CvConfig {
    pub fn validate(&self, bundle: &DataBundle) -> Result<()> {
        if self.t1 >= self.t2 {
            return Err(Error::InvalidInput("t1 must precede t2".into()));
        }
        let (first, last) = (bundle.price.start_date, bundle.price.end_date());
        if self.t1 < first || self.t2 > last {
            return Err(Error::InvalidInput(format!(
                "validation window {}..{} lies outside data range {first}..{last}",
                self.t1, self.t2
            )));
        }
        if self.q == 0 || self.tau == 0 {
            return Err(Error::InvalidInput("q and tau must be positive".into()));
        }
        if self.grid.size() == 0 {
            return Err(Error::InvalidInput("empty hyperparameter grid".into()));
        }
        Ok(())
    }

    pub fn validation_dates(&self) -> Vec<NaiveDate> {
        let mut out = Vec::new();
        let mut t = self.t1;
        while t <= self.t2 {
            out.push(t);
            t += Duration::days(self.q as i64);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateScore {
    pub date: NaiveDate,
    pub raw_accuracy: f64,
    pub balanced_accuracy: f64,
    pub score: f64,
    pub n_predictions: usize,
    /// Latest provenance date among all training samples of the fold.
    pub latest_training_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub mean_score: f64,
    pub n_dates_used: usize,
    pub n_dates_skipped: usize,
    pub per_date: Vec<DateScore>,
    pub approximate: bool,
}

/// Fails if any training sample draws on data from `cutoff` or later.
pub fn assert_no_lookahead(samples: &[Sample], cutoff: NaiveDate) -> Result<()> {
    match samples.iter().find(|s| s.latest_date() >= cutoff) {
        Some(s) => Err(Error::Lookahead {
            market_id: s.market_id.clone(),
            latest: s.latest_date(),
            cutoff,
        }),
        None => Ok(()),
    }
}

/// Reference imputation used only for ground-truth labels.
pub fn reference_panel(bundle: &DataBundle, impute: &ImputeConfig) -> Result<DensePanel> {
    let cfg = ImputeConfig {
        max_rank: impute
            .max_rank
            .min(bundle.price.num_markets())
            .min(bundle.price.num_days),
        ..impute.clone()
    };
    Ok(soft_impute(&bundle.price, &cfg)?.0)
}

fn block_mean(row: &[f64], from: usize, len: usize) -> f64 {
    row[from..from + len].iter().sum::<f64>() / len as f64
}

/// Imputes a price panel and its volume panel with the same settings. The
/// rank cap shrinks to fit the panel, and a volume panel with no
/// observations becomes all zeros.
pub fn impute_pair(price: &SparsePanel, volume: &SparsePanel, cfg: &ImputeConfig) -> Result<(DensePanel, DensePanel)> {
    let cfg = ImputeConfig {
        max_rank: cfg.max_rank.min(price.num_markets()).min(price.num_days),
        ..cfg.clone()
    };
    let (p, _) = soft_impute(price, &cfg)?;
    let v = if volume.observed_count() == 0 {
        DensePanel::constant(volume, 0.0)
    } else {
        soft_impute(volume, &cfg.for_volumes())?.0
    };
    Ok((p, v))
}

enum FoldResult {
    Scored(DateScore),
    Skipped,
}

fn run_fold(
    bundle: &DataBundle,
    config: &CvConfig,
    candidate: &Candidate,
    truth_panel: &DensePanel,
    frozen: Option<&(DensePanel, DensePanel)>,
    t: NaiveDate,
) -> Result<FoldResult> {
    let q = config.q;
    let start = bundle.price.start_date;
    let available = (t - start).num_days() as usize + config.leak_days;
    let steps = available / q;
    let Some(t_idx) = truth_panel.day_offset(t) else {
        return Ok(FoldResult::Skipped);
    };
    if steps < config.tau + 1 || t_idx < q || t_idx + q > truth_panel.num_days {
        return Ok(FoldResult::Skipped);
    }
    let first = available - steps * q;
    let len = steps * q;

    let (price_dense, volume_dense) = match frozen {
        Some((p, v)) => (p.slice_days(first, len)?, v.slice_days(first, len)?),
        None => impute_pair(
            &bundle.price.slice_days(first, len)?,
            &bundle.volume.slice_days(first, len)?,
            &ImputeConfig {
                max_rank: candidate.max_rank,
                ..config.impute.clone()
            },
        )?,
    };
    let price_qp = quantize(&price_dense, q)?;
    let volume_qp = quantize(&volume_dense, q)?;
    let features = FeatureConfig {
        tau: config.tau,
        k: candidate.k,
    };

    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut latest = start;
    for market in &bundle.target_markets {
        let samples = build_samples(&price_qp, &volume_qp, market, &features, &bundle.registry)?;
        assert_no_lookahead(&samples, t)?;
        if samples.is_empty() {
            continue;
        }
        latest = latest.max(samples.iter().map(Sample::latest_date).max().unwrap());
        let x = build_test_vector(&price_qp, &volume_qp, market, &features, steps + 1)?;
        let direction = match config.classifier {
            Classifier::Forest => {
                let params = ForestParams {
                    num_trees: candidate.num_trees,
                    ..config.forest.clone()
                };
                let model = fit_forest(samples, &params)?;
                crate::model::forest_predict(&model, &x)?.0
            }
            Classifier::Logistic => {
                let params = LogisticParams {
                    c: candidate.c,
                    ..config.logistic
                };
                fit_logistic(&samples, &params)?.0.predict(&x)?
            }
        };
        let m = truth_panel
            .market_index(market)
            .ok_or_else(|| Error::UnknownMarket(market.clone()))?;
        let row = truth_panel.row(m);
        let prev = block_mean(row, t_idx - q, q);
        let next = block_mean(row, t_idx, q);
        truth.push(Direction::of_change((next - prev) / prev));
        pred.push(direction);
    }
    if truth.is_empty() {
        return Ok(FoldResult::Skipped);
    }
    let raw = raw_accuracy(&truth, &pred)?;
    let balanced = balanced_accuracy(&truth, &pred)?;
    Ok(FoldResult::Scored(DateScore {
        date: t,
        raw_accuracy: raw,
        balanced_accuracy: balanced,
        score: raw + balanced,
        n_predictions: truth.len(),
        latest_training_date: latest,
    }))
}

/// Mean of (raw + balanced accuracy) over validation dates for one candidate.
pub fn time_series_cv(bundle: &DataBundle, config: &CvConfig, candidate: &Candidate) -> Result<CvOutcome> {
    config.validate(bundle)?;
    let truth = reference_panel(bundle, &config.impute)?;
    cv_with_truth(bundle, config, candidate, &truth)
}

fn cv_with_truth(
    bundle: &DataBundle,
    config: &CvConfig,
    candidate: &Candidate,
    truth: &DensePanel,
) -> Result<CvOutcome> {
    let frozen = if config.frozen_imputation {
        Some(impute_pair(
            &bundle.price,
            &bundle.volume,
            &ImputeConfig {
                max_rank: candidate.max_rank,
                ..config.impute.clone()
            },
        )?)
    } else {
        None
    };
    let results: Vec<FoldResult> = config
        .validation_dates()
        .into_par_iter()
        .map(|t| run_fold(bundle, config, candidate, truth, frozen.as_ref(), t))
        .collect::<Result<_>>()?;
    let mut per_date = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            FoldResult::Scored(s) => per_date.push(s),
            FoldResult::Skipped => skipped += 1,
        }
    }
    if skipped > 0 {
        tracing::info!(skipped, "validation dates skipped for lack of history or ground truth");
    }
    let mean_score = if per_date.is_empty() {
        0.0
    } else {
        per_date.iter().map(|d| d.score).sum::<f64>() / per_date.len() as f64
    };
    Ok(CvOutcome {
        mean_score,
        n_dates_used: per_date.len(),
        n_dates_skipped: skipped,
        per_date,
        approximate: config.frozen_imputation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub candidate_id: usize,
    pub candidate: Candidate,
    pub mean_score: f64,
    pub n_dates_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: Candidate,
    pub best_score: f64,
    pub table: Vec<ScoreRow>,
    pub approximate: bool,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate_id,max_rank,k,C,num_trees,mean_score,n_dates_used\n");
        for row in &self.table {
            let c = &row.candidate;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.candidate_id, c.max_rank, c.k, c.c, c.num_trees, row.mean_score, row.n_dates_used
            ));
        }
        out
    }
}

/// Exhaustive grid search; the first candidate in grid order wins ties.
pub fn sweep(bundle: &DataBundle, config: &CvConfig) -> Result<SweepResult> {
    config.validate(bundle)?;
    let truth = reference_panel(bundle, &config.impute)?;
    let mut table = Vec::with_capacity(config.grid.size());
    for (id, candidate) in config.grid.candidates().into_iter().enumerate() {
        let outcome = cv_with_truth(bundle, config, &candidate, &truth)?;
        tracing::debug!(id, score = outcome.mean_score, "candidate scored");
        table.push(ScoreRow {
            candidate_id: id,
            candidate,
            mean_score: outcome.mean_score,
            n_dates_used: outcome.n_dates_used,
        });
    }
    let best = table
        .iter()
        .fold(None::<&ScoreRow>, |best, row| match best {
            Some(b) if b.mean_score >= row.mean_score => Some(b),
            _ => Some(row),
        })
        .expect("grid is nonempty");
    Ok(SweepResult {
        best: best.candidate,
        best_score: best.mean_score,
        table,
        approximate: config.frozen_imputation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::*;

    #[test]
    fn raw_accuracy_examples() {
        assert_eq!(raw_accuracy(&[Up, Down], &[Up, Down]).unwrap(), 1.0);
        assert_eq!(
            raw_accuracy(&[Up, Up, Down, Flat], &[Up, Down, Down, Flat]).unwrap(),
            0.75
        );
        assert_eq!(raw_accuracy(&[Up, Flat], &[Down, Up]).unwrap(), 0.0);
        assert!(raw_accuracy(&[], &[]).is_err());
        assert!(raw_accuracy(&[Up], &[]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        let b = balanced_accuracy(&[Up, Up, Down, Flat], &[Up, Down, Down, Flat]).unwrap();
        approx::assert_abs_diff_eq!(b, 2.5 / 3.0, epsilon = 1e-15);
        assert_eq!(balanced_accuracy(&[Up; 4], &[Up; 4]).unwrap(), 1.0);
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn rmse_in_rupees_per_kg() {
        assert_eq!(rmse(&[1000.0], &[1000.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1000.0], &[1100.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[1000.0, 1000.0], &[1100.0, 900.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn grid_product_order() {
        let g = Grid {
            max_rank: vec![1, 2],
            k: vec![1],
            c: vec![0.1, 1.0],
            num_trees: vec![5, 10, 20],
        };
        let c = g.candidates();
        assert_eq!(c.len(), 12);
        assert_eq!(g.size(), 12);
        assert_eq!(c[0].num_trees, 5);
        assert_eq!(c[1].num_trees, 10);
        assert_eq!(c[3].c, 1.0);
        assert_eq!(c[6].max_rank, 2);
    }
}
