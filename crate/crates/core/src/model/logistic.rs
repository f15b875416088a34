//! Multinomial logistic regression baseline on standardized features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{argmax_direction, Direction, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// Inverse L2 regularization strength.
    pub c: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm drops below this.
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Classes seen in training, in `[down, flat, up]` order.
    pub classes: Vec<Direction>,
    /// One weight row per entry of `classes`.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticReport {
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    /// Set when training saw a single class.
    pub degenerate: Option<Direction>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

struct Problem {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    k: usize,
    p: usize,
    c: f64,
}

/// Parameters flattened as `k` rows of `p` weights followed by `k` intercepts.
impl Problem {
    fn logits(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let w = &theta[j * self.p..(j + 1) * self.p];
            *o = theta[self.k * self.p + j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Mean cross-entropy plus `||W||^2 / (2 C n)`.
    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        let mut z = vec![0.0; self.k];
        let mut total = 0.0;
        for (x, &y) in self.x.iter().zip(&self.y) {
            self.logits(theta, x, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        let w2: f64 = theta[..self.k * self.p].iter().map(|w| w * w).sum();
        total / n + w2 / (2.0 * self.c * n)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.x.len() as f64;
        let mut g = vec![0.0; theta.len()];
        let mut z = vec![0.0; self.k];
        for (x, &y) in self.x.iter().zip(&self.y) {
            self.logits(theta, x, &mut z);
            softmax_in_place(&mut z);
            for j in 0..self.k {
                let r = z[j] - if j == y { 1.0 } else { 0.0 };
                for (gi, xi) in g[j * self.p..(j + 1) * self.p].iter_mut().zip(x) {
                    *gi += r * xi;
                }
                g[self.k * self.p + j] += r;
            }
        }
        for (i, gi) in g.iter_mut().enumerate() {
            *gi /= n;
            if i < self.k * self.p {
                *gi += theta[i] / (self.c * n);
            }
        }
        g
    }
}

/// Batch gradient descent (diagonally preconditioned) with Armijo
/// backtracking; the objective never increases across accepted steps.
pub fn fit_logistic(samples: &[Sample], params: &LogisticParams) -> Result<(LogisticModel, LogisticReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if params.c.is_nan() || params.c <= 0.0 {
        return Err(Error::InvalidInput("C must be positive".into()));
    }
    let p = samples[0].features.len();
    if let Some(bad) = samples.iter().find(|s| s.features.len() != p) {
        return Err(Error::FeatureLength {
            expected: p,
            got: bad.features.len(),
        });
    }
    let n = samples.len() as f64;
    let mut means = vec![0.0; p];
    for s in samples {
        for (m, v) in means.iter_mut().zip(&s.features) {
            *m += v / n;
        }
    }
    let mut scales = vec![0.0; p];
    for s in samples {
        for ((sc, v), m) in scales.iter_mut().zip(&s.features).zip(&means) {
            *sc += (v - m).powi(2) / n;
        }
    }
    for sc in scales.iter_mut() {
        *sc = if *sc > 0.0 { sc.sqrt() } else { 1.0 };
    }

    let classes: Vec<Direction> = Direction::ALL
        .into_iter()
        .filter(|d| samples.iter().any(|s| s.direction == *d))
        .collect();
    let k = classes.len();
    if k == 1 {
        let model = LogisticModel {
            classes: classes.clone(),
            weights: vec![vec![0.0; p]],
            intercepts: vec![0.0],
            means,
            scales,
            c: params.c,
        };
        let report = LogisticReport {
            iterations: 0,
            loss_trace: Vec::new(),
            converged: true,
            degenerate: Some(classes[0]),
        };
        return Ok((model, report));
    }

    let problem = Problem {
        x: samples
            .iter()
            .map(|s| {
                s.features
                    .iter()
                    .zip(means.iter().zip(&scales))
                    .map(|(v, (m, sc))| (v - m) / sc)
                    .collect()
            })
            .collect(),
        y: samples
            .iter()
            .map(|s| classes.iter().position(|c| *c == s.direction).unwrap())
            .collect(),
        k,
        p,
        c: params.c,
    };

    // diagonal preconditioner: weight coordinates carry the extra curvature
    // of the L2 term, which dominates as C -> 0
    let ridge = 1.0 / (params.c * n);
    let precond: Vec<f64> = (0..k * p + k)
        .map(|i| if i < k * p { 1.0 / (1.0 + ridge) } else { 1.0 })
        .collect();
    let mut theta = vec![0.0; k * p + k];
    let mut loss = problem.loss(&theta);
    let mut trace = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        let g = problem.gradient(&theta);
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < params.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir: Vec<f64> = g.iter().zip(&precond).map(|(gi, pi)| gi * pi).collect();
        let decrease: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, di)| t - step * di).collect();
            let cand_loss = problem.loss(&cand);
            if cand_loss <= loss - 0.5 * step * decrease {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(loss);
        step *= 2.0;
    }

    let weights = (0..k).map(|j| theta[j * p..(j + 1) * p].to_vec()).collect();
    let intercepts = theta[k * p..].to_vec();
    Ok((
        LogisticModel {
            classes,
            weights,
            intercepts,
            means,
            scales,
            c: params.c,
        },
        LogisticReport {
            iterations,
            loss_trace: trace,
            converged,
            degenerate: None,
        },
    ))
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 3]> {
        if x.len() != self.means.len() {
            return Err(Error::FeatureLength {
                expected: self.means.len(),
                got: x.len(),
            });
        }
        let z: Vec<f64> = x
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax_in_place(&mut logits);
        let mut probs = [0.0; 3];
        for (c, p) in self.classes.iter().zip(logits) {
            probs[c.index()] = p;
        }
        Ok(probs)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Direction> {
        Ok(argmax_direction(&self.predict_proba(x)?))
    }
}
