//! Nuclear-norm regularized matrix completion.
//!
//! Missing cells are filled by iterating `Z <- S_lambda(P_obs(X) + P_miss(Z))`,
//! where `S_lambda` soft-thresholds singular values, warm-starting down a
//! descending lambda grid. Lambda is chosen on a seeded holdout of observed
//! cells, then the path is refit on every observed cell.

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SparsePanel;
use crate::error::{Error, Result};

/// Imputed prices never go below 1 Rs per 100 kg.
pub const PRICE_FLOOR: f64 = 1.0;
pub const VOLUME_FLOOR: f64 = 0.0;

const EIGEN_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeConfig {
    pub max_rank: usize,
    /// Strictly descending; empty selects the automatic grid.
    pub lambda_grid: Vec<f64>,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    pub floor: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            max_rank: 10,
            lambda_grid: Vec::new(),
            rel_tol: 1e-5,
            max_iters: 200,
            holdout_fraction: 0.1,
            rng_seed: 0,
            floor: PRICE_FLOOR,
        }
    }
}

impl ImputeConfig {
    pub fn for_volumes(&self) -> Self {
        Self {
            floor: VOLUME_FLOOR,
            ..self.clone()
        }
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.max_rank == 0 || self.max_rank > rows.min(cols) {
            return Err(Error::InvalidInput(format!(
                "max_rank {} must be in 1..={}",
                self.max_rank,
                rows.min(cols)
            )));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidInput("lambda grid must be nonnegative".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("lambda grid must be strictly descending".into()));
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 || self.max_iters == 0 {
            return Err(Error::InvalidInput("rel_tol and max_iters must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::InvalidInput("holdout_fraction must lie in (0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Fully populated market-by-day grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePanel {
    pub produce: String,
    pub markets: Vec<String>,
    pub start_date: NaiveDate,
    pub num_days: usize,
    values: Vec<f64>,
}

impl DensePanel {
    pub fn new(
        produce: &str,
        markets: Vec<String>,
        start_date: NaiveDate,
        num_days: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if markets.is_empty() || num_days == 0 || values.len() != markets.len() * num_days {
            return Err(Error::InvalidInput("dense panel shape mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dense panel has non-finite values".into()));
        }
        Ok(Self {
            produce: produce.to_string(),
            markets,
            start_date,
            num_days,
            values,
        })
    }

    pub fn num_markets(&self) -> usize {
        self.markets.len()
    }

    pub fn get(&self, m: usize, t: usize) -> f64 {
        self.values[m * self.num_days + t]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.num_days..(m + 1) * self.num_days]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.start_date + chrono::Duration::days(t as i64)
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date(self.num_days - 1)
    }

    pub fn day_offset(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start_date).num_days();
        (d >= 0 && (d as usize) < self.num_days).then_some(d as usize)
    }

    pub fn market_index(&self, market_id: &str) -> Option<usize> {
        self.markets.iter().position(|m| m == market_id)
    }

    /// Days `[from, from + len)` as a new panel.
    pub fn slice_days(&self, from: usize, len: usize) -> Result<Self> {
        if len == 0 || from + len > self.num_days {
            return Err(Error::InvalidInput("day slice outside panel".into()));
        }
        let mut values = Vec::with_capacity(self.markets.len() * len);
        for m in 0..self.markets.len() {
            values.extend_from_slice(&self.row(m)[from..from + len]);
        }
        Self::new(&self.produce, self.markets.clone(), self.date(from), len, values)
    }

    /// A panel of constant value, used when a series has no observations at all.
    pub fn constant(like: &SparsePanel, value: f64) -> Self {
        Self {
            produce: like.produce.clone(),
            markets: like.markets.clone(),
            start_date: like.start_date,
            num_days: like.num_days,
            values: vec![value; like.markets.len() * like.num_days],
        }
    }
}

/// Truncated factorization `U diag(d) V^T`.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub u: DMatrix<f64>,
    pub d: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.d.iter().filter(|&&x| x > 0.0).count()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.d.iter().sum()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut ud = self.u.clone();
        for (j, &dj) in self.d.iter().enumerate() {
            ud.column_mut(j).scale_mut(dj);
        }
        ud * self.v.transpose()
    }
}

/// Soft-thresholds the singular values of `matrix` by `lambda` and keeps at
/// most `rank_cap` of them.
///
/// The decomposition runs on the smaller Gram matrix: with `A A^T = U S^2 U^T`
/// the right factor is recovered as `V = A^T U S^{-1}`.
pub fn soft_threshold_svd(matrix: &DMatrix<f64>, lambda: f64, rank_cap: usize) -> Result<LowRank> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    if matrix.nrows() > matrix.ncols() {
        let t = soft_threshold_svd(&matrix.transpose(), lambda, rank_cap)?;
        return Ok(LowRank { u: t.v, d: t.d, v: t.u });
    }
    let (rows, cols) = matrix.shape();
    let gram = matrix * matrix.transpose();
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, EIGEN_MAX_ITERS).ok_or(Error::SvdNonConvergence {
        iterations: EIGEN_MAX_ITERS,
    })?;
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let keep: Vec<(usize, f64, f64)> = order
        .into_iter()
        .take(rank_cap)
        .map(|i| {
            let sigma = eig.eigenvalues[i].max(0.0).sqrt();
            (i, sigma, (sigma - lambda).max(0.0))
        })
        .filter(|&(_, sigma, d)| d > 0.0 && sigma > 0.0)
        .collect();

    let r = keep.len();
    let mut u = DMatrix::zeros(rows, r);
    let mut d = Vec::with_capacity(r);
    let mut scaled = DMatrix::zeros(rows, r);
    for (j, &(i, sigma, dj)) in keep.iter().enumerate() {
        u.set_column(j, &eig.eigenvectors.column(i));
        scaled.set_column(j, &(eig.eigenvectors.column(i) / sigma));
        d.push(dj);
    }
    let v = if r == 0 {
        DMatrix::zeros(cols, 0)
    } else {
        matrix.transpose() * scaled
    };
    Ok(LowRank { u, d, v })
}

/// Observed cells of an `M x T` matrix with a boolean mask.
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    pub values: DMatrix<f64>,
    pub observed: DMatrix<bool>,
}

impl MaskedMatrix {
    pub fn from_panel(panel: &SparsePanel) -> Self {
        let (m, t) = (panel.num_markets(), panel.num_days);
        let values = DMatrix::from_fn(m, t, |i, j| panel.get(i, j).unwrap_or(0.0));
        let observed = DMatrix::from_fn(m, t, |i, j| panel.get(i, j).is_some());
        Self { values, observed }
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    fn overlay(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.values.nrows(), self.values.ncols(), |i, j| {
            if self.observed[(i, j)] {
                self.values[(i, j)]
            } else {
                z[(i, j)]
            }
        })
    }

    fn zero_filled(&self) -> DMatrix<f64> {
        self.overlay(&DMatrix::zeros(self.values.nrows(), self.values.ncols()))
    }

    /// `1/2 sum_obs (X - Z)^2 + lambda * ||Z||_*`
    pub fn objective(&self, z: &LowRank, dense_z: &DMatrix<f64>, lambda: f64) -> f64 {
        let mut loss = 0.0;
        for ((x, zz), &o) in self.values.iter().zip(dense_z.iter()).zip(self.observed.iter()) {
            if o {
                loss += (x - zz) * (x - zz);
            }
        }
        0.5 * loss + lambda * z.nuclear_norm()
    }
}

/// Result of fitting one lambda on the path.
#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub lambda: f64,
    pub iterations: usize,
    pub factor: LowRank,
    pub completed: DMatrix<f64>,
    /// Objective after each iteration (only when tracing).
    pub objective_trace: Vec<f64>,
}

/// Runs the soft-impute iteration for one lambda, warm-started from `start`.
pub fn fit_lambda(
    data: &MaskedMatrix,
    start: &DMatrix<f64>,
    lambda: f64,
    max_rank: usize,
    rel_tol: f64,
    max_iters: usize,
    trace: bool,
) -> Result<LambdaFit> {
    let mut z = start.clone();
    let mut objective_trace = Vec::new();
    let mut factor = None;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let filled = data.overlay(&z);
        let f = soft_threshold_svd(&filled, lambda, max_rank)?;
        let z_new = f.reconstruct();
        if trace {
            objective_trace.push(data.objective(&f, &z_new, lambda));
        }
        let change = (&z_new - &z).norm();
        let base = z.norm();
        z = z_new;
        factor = Some(f);
        if base > 0.0 && change / base < rel_tol || base == 0.0 && change == 0.0 {
            break;
        }
    }
    Ok(LambdaFit {
        lambda,
        iterations,
        factor: factor.expect("max_iters >= 1"),
        completed: z,
        objective_trace,
    })
}

/// Ten log-spaced values from the top singular value of the zero-filled
/// matrix down to 1/100 of it.
pub fn auto_lambda_grid(data: &MaskedMatrix) -> Result<Vec<f64>> {
    let top = soft_threshold_svd(&data.zero_filled(), 0.0, 1)?;
    let sigma = top.d.first().copied().unwrap_or(0.0);
    if sigma == 0.0 {
        return Ok(vec![0.0]);
    }
    let n = 10;
    Ok((0..n)
        .map(|i| sigma * 10f64.powf(-2.0 * i as f64 / (n - 1) as f64))
        .collect())
}

/// Runs the warm-started path over `grid`, stopping after index `upto`.
pub fn fit_path(
    data: &MaskedMatrix,
    grid: &[f64],
    max_rank: usize,
    rel_tol: f64,
    max_iters: usize,
    upto: usize,
    trace: bool,
) -> Result<Vec<LambdaFit>> {
    let mut start = DMatrix::zeros(data.values.nrows(), data.values.ncols());
    let mut fits = Vec::with_capacity(upto + 1);
    for &lambda in &grid[..=upto] {
        let fit = fit_lambda(data, &start, lambda, max_rank, rel_tol, max_iters, trace)?;
        start = fit.completed.clone();
        fits.push(fit);
    }
    Ok(fits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub lambda: f64,
    pub rank: usize,
    pub iters_per_lambda: Vec<usize>,
    pub holdout_rmse: f64,
}

/// Completes a masked matrix; returns the low-rank estimate with observed
/// cells restored, before any floor is applied.
pub fn impute_matrix(data: &MaskedMatrix, config: &ImputeConfig) -> Result<(DMatrix<f64>, ImputeReport)> {
    let (rows, cols) = data.values.shape();
    config.validate(rows, cols)?;
    let observed: Vec<(usize, usize)> = (0..cols)
        .flat_map(|j| (0..rows).map(move |i| (i, j)))
        .filter(|&(i, j)| data.observed[(i, j)])
        .collect();
    if observed.is_empty() {
        return Err(Error::EmptyMatrix);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut shuffled = observed.clone();
    shuffled.shuffle(&mut rng);
    let n_hold = if observed.len() < 2 {
        0
    } else {
        ((config.holdout_fraction * observed.len() as f64).round() as usize).clamp(1, observed.len() - 1)
    };
    let holdout = &shuffled[..n_hold];
    let mut train = data.clone();
    for &(i, j) in holdout {
        train.observed[(i, j)] = false;
    }

    let grid = if config.lambda_grid.is_empty() {
        auto_lambda_grid(&train)?
    } else {
        config.lambda_grid.clone()
    };

    let (best, holdout_rmse) = if holdout.is_empty() {
        (grid.len() - 1, 0.0)
    } else {
        let path = fit_path(
            &train,
            &grid,
            config.max_rank,
            config.rel_tol,
            config.max_iters,
            grid.len() - 1,
            false,
        )?;
        let mut best = (0, f64::INFINITY);
        for (k, fit) in path.iter().enumerate() {
            let mse = holdout
                .iter()
                .map(|&(i, j)| (fit.completed[(i, j)] - data.values[(i, j)]).powi(2))
                .sum::<f64>()
                / holdout.len() as f64;
            let rmse = mse.sqrt();
            if rmse < best.1 {
                best = (k, rmse);
            }
        }
        best
    };

    let path = fit_path(
        data,
        &grid,
        config.max_rank,
        config.rel_tol,
        config.max_iters,
        best,
        false,
    )?;
    let last = path.last().expect("path has at least one lambda");
    let completed = data.overlay(&last.completed);
    let report = ImputeReport {
        lambda: grid[best],
        rank: last.factor.rank(),
        iters_per_lambda: path.iter().map(|f| f.iterations).collect(),
        holdout_rmse,
    };
    Ok((completed, report))
}

/// Fills every missing cell of `panel` and applies `config.floor`.
pub fn soft_impute(panel: &SparsePanel, config: &ImputeConfig) -> Result<(DensePanel, ImputeReport)> {
    let data = MaskedMatrix::from_panel(panel);
    let (completed, report) = impute_matrix(&data, config)?;
    let (m, t) = completed.shape();
    let mut values = Vec::with_capacity(m * t);
    for i in 0..m {
        for j in 0..t {
            values.push(completed[(i, j)].max(config.floor));
        }
    }
    let dense = DensePanel::new(
        &panel.produce,
        panel.markets.clone(),
        panel.start_date,
        panel.num_days,
        values,
    )?;
    Ok((dense, report))
}
