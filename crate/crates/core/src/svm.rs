//! Soft-margin SVM dual solved by sequential minimal optimization.
//!
//! We solve
//!
//! ```text
//! maximize   e'a - 1/2 a' diag(y) K diag(y) a
//! subject to y'a = 0,  0 <= a <= C
//! ```
//!
//! on a precomputed [`GramMatrix`]. Internally the solver minimizes
//! `f(a) = 1/2 a'Qa - e'a` with `Q = diag(y) K diag(y)` and keeps the gradient
//! `G = Qa - e` up to date. The working pair is the maximal violating pair of
//! the KKT conditions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::GramMatrix;

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_C: f64 = 1000.0;

const TAU: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("label at index {0} is {1}, expected -1 or +1")]
    InvalidLabel(usize, f64),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("regularization C must be positive and finite, got {0}")]
    InvalidC(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
}

/// Validated vector of ±1 labels containing both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels(Vec<f64>);

impl Labels {
    pub fn new(values: Vec<f64>) -> Result<Self, SvmError> {
        for (i, &y) in values.iter().enumerate() {
            if y != 1.0 && y != -1.0 {
                return Err(SvmError::InvalidLabel(i, y));
            }
        }
        let positives = values.iter().filter(|&&y| y > 0.0).count();
        if positives == 0 || positives == values.len() {
            return Err(SvmError::SingleClass);
        }
        Ok(Labels(values))
    }

    pub fn from_signs(signs: &[i8]) -> Result<Self, SvmError> {
        Self::new(signs.iter().map(|&s| s as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Labels, SvmError> {
        Labels::new(indices.iter().map(|&i| self.0[i]).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub gram: &'a GramMatrix,
    pub labels: &'a Labels,
}

impl<'a> TrainingSet<'a> {
    pub fn new(gram: &'a GramMatrix, labels: &'a Labels) -> Result<Self, SvmError> {
        if gram.size() != labels.len() {
            return Err(SvmError::SizeMismatch {
                expected: gram.size(),
                got: labels.len(),
            });
        }
        Ok(TrainingSet { gram, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Solution of the dual together with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub support_indices: Vec<usize>,
    /// Dual objective `e'a - 1/2 a'Qa` at `alpha`.
    pub objective: f64,
    pub iterations: usize,
    /// Maximal KKT violation `m(a) - M(a)` at return.
    pub kkt_violation: f64,
    pub converged: bool,
}

impl SvmModel {
    /// Decision value `sum_i y_i a_i k(x_i, x) + b` for a kernel row against the training set.
    pub fn decision_value(&self, labels: &Labels, kernel_row: &[f64]) -> Result<f64, SvmError> {
        if kernel_row.len() != self.alpha.len() || labels.len() != self.alpha.len() {
            return Err(SvmError::SizeMismatch {
                expected: self.alpha.len(),
                got: kernel_row.len(),
            });
        }
        let y = labels.as_slice();
        let sum: f64 = self
            .support_indices
            .iter()
            .map(|&i| y[i] * self.alpha[i] * kernel_row[i])
            .sum();
        Ok(sum + self.bias)
    }

    /// Class prediction; a decision value of exactly 0 maps to +1.
    pub fn predict(&self, labels: &Labels, kernel_row: &[f64]) -> Result<(i8, f64), SvmError> {
        let value = self.decision_value(labels, kernel_row)?;
        Ok((sign_label(value), value))
    }
}

#[inline]
pub fn sign_label(value: f64) -> i8 {
    if value >= 0.0 {
        1
    } else {
        -1
    }
}

/// SMO parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoSolver {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SmoSolver {
    fn default() -> Self {
        SmoSolver {
            c: DEFAULT_C,
            tol: DEFAULT_TOLERANCE,
            max_iter: 10_000_000,
        }
    }
}

impl SmoSolver {
    pub fn new(c: f64, tol: f64) -> Self {
        SmoSolver {
            c,
            tol,
            ..Default::default()
        }
    }

    pub fn solve(&self, ts: TrainingSet<'_>, warm_start: Option<&[f64]>) -> Result<SvmModel, SvmError> {
        solve_dual_with(ts, self, warm_start)
    }
}

/// Solves the dual to KKT tolerance `tol`, optionally warm-started.
pub fn solve_dual(ts: TrainingSet<'_>, c: f64, tol: f64, warm_start: Option<&[f64]>) -> Result<SvmModel, SvmError> {
    SmoSolver::new(c, tol).solve(ts, warm_start)
}

fn solve_dual_with(ts: TrainingSet<'_>, params: &SmoSolver, warm_start: Option<&[f64]>) -> Result<SvmModel, SvmError> {
    let c = params.c;
    if !(c > 0.0 && c.is_finite()) {
        return Err(SvmError::InvalidC(c));
    }
    if params.tol.is_nan() || params.tol <= 0.0 {
        return Err(SvmError::InvalidTolerance(params.tol));
    }
    let l = ts.len();
    let y = ts.labels.as_slice();
    let k = ts.gram;

    let mut alpha = match warm_start {
        Some(a) if a.len() != l => {
            return Err(SvmError::SizeMismatch {
                expected: l,
                got: a.len(),
            })
        }
        Some(a) => project_feasible(a, y, c),
        None => vec![0.0; l],
    };

    // G = Q a - e
    let mut grad = vec![-1.0; l];
    for (i, &ai) in alpha.iter().enumerate() {
        if ai != 0.0 {
            let row = k.row(i);
            for j in 0..l {
                grad[j] += y[i] * y[j] * ai * row[j];
            }
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        let (i, j, gap) = match select_working_pair(&alpha, &grad, y, c) {
            Some(sel) => sel,
            None => {
                converged = true;
                break;
            }
        };
        if gap <= params.tol {
            converged = true;
            break;
        }
        iterations += 1;
        update_pair(&mut alpha, &mut grad, k, y, c, i, j);
    }

    let kkt_violation = select_working_pair(&alpha, &grad, y, c)
        .map(|(_, _, g)| g.max(0.0))
        .unwrap_or(0.0);
    let bias = bias_from_gradient(&alpha, &grad, y, c);
    let objective = -alpha.iter().zip(&grad).map(|(a, g)| 0.5 * a * (g - 1.0)).sum::<f64>();
    let support_indices = alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 0.0)
        .map(|(i, _)| i)
        .collect();

    Ok(SvmModel {
        alpha,
        bias,
        c,
        support_indices,
        objective,
        iterations,
        kkt_violation,
        converged,
    })
}

#[inline]
fn in_up(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

#[inline]
fn in_low(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

/// Maximal violating pair: `i = argmax_{I_up} -y G`, `j = argmin_{I_low} -y G`.
fn select_working_pair(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> Option<(usize, usize, f64)> {
    let mut gmax = f64::NEG_INFINITY;
    let mut gmin = f64::INFINITY;
    let mut i_sel = None;
    let mut j_sel = None;
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        if in_up(alpha[t], y[t], c) && v > gmax {
            gmax = v;
            i_sel = Some(t);
        }
        if in_low(alpha[t], y[t], c) && v < gmin {
            gmin = v;
            j_sel = Some(t);
        }
    }
    match (i_sel, j_sel) {
        (Some(i), Some(j)) => Some((i, j, gmax - gmin)),
        _ => None,
    }
}

/// Analytic two-variable update on the pair `(i, j)`, clipped to the box.
fn update_pair(alpha: &mut [f64], grad: &mut [f64], k: &GramMatrix, y: &[f64], c: f64, i: usize, j: usize) {
    let ki = k.row(i);
    let kj = k.row(j);
    let old_ai = alpha[i];
    let old_aj = alpha[j];
    let mut eta = ki[i] + kj[j] - 2.0 * ki[j];
    if eta <= 0.0 {
        eta = TAU;
    }

    if y[i] != y[j] {
        let delta = (-grad[i] - grad[j]) / eta;
        let diff = alpha[i] - alpha[j];
        alpha[i] += delta;
        alpha[j] += delta;
        if diff > 0.0 {
            if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = diff;
            }
        } else if alpha[i] < 0.0 {
            alpha[i] = 0.0;
            alpha[j] = -diff;
        }
        if diff > 0.0 {
            if alpha[i] > c {
                alpha[i] = c;
                alpha[j] = c - diff;
            }
        } else if alpha[j] > c {
            alpha[j] = c;
            alpha[i] = c + diff;
        }
    } else {
        let delta = (grad[i] - grad[j]) / eta;
        let sum = alpha[i] + alpha[j];
        alpha[i] -= delta;
        alpha[j] += delta;
        if sum > c {
            if alpha[i] > c {
                alpha[i] = c;
                alpha[j] = sum - c;
            }
        } else if alpha[j] < 0.0 {
            alpha[j] = 0.0;
            alpha[i] = sum;
        }
        if sum > c {
            if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = sum - c;
            }
        } else if alpha[i] < 0.0 {
            alpha[i] = 0.0;
            alpha[j] = sum;
        }
    }

    let dai = alpha[i] - old_ai;
    let daj = alpha[j] - old_aj;
    let (yi, yj) = (y[i], y[j]);
    for t in 0..grad.len() {
        grad[t] += y[t] * (yi * ki[t] * dai + yj * kj[t] * daj);
    }
}

/// Bias from the KKT conditions given a gradient `G = Qa - e`.
///
/// Averages `-y_i G_i` over free support vectors. Without free vectors, the
/// midpoint of the interval allowed by the bounded ones.
fn bias_from_gradient(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..alpha.len() {
        // rho candidate; b = -rho
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += yg;
            free_count += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            upper = upper.min(yg);
        } else {
            lower = lower.max(yg);
        }
    }
    let rho = if free_count > 0 {
        free_sum / free_count as f64
    } else if upper.is_finite() && lower.is_finite() {
        0.5 * (upper + lower)
    } else if upper.is_finite() {
        upper
    } else if lower.is_finite() {
        lower
    } else {
        0.0
    };
    -rho
}

/// Recomputes the bias of `alpha` from scratch against the training set.
pub fn recover_bias(alpha: &[f64], c: f64, ts: TrainingSet<'_>) -> f64 {
    let y = ts.labels.as_slice();
    let l = alpha.len();
    let grad: Vec<f64> = (0..l)
        .map(|i| {
            let row = ts.gram.row(i);
            let f: f64 = (0..l).map(|j| y[j] * alpha[j] * row[j]).sum();
            y[i] * f - 1.0
        })
        .collect();
    bias_from_gradient(alpha, &grad, y, c)
}

/// Euclidean projection onto `{0 <= a <= C, y'a = 0}`.
///
/// Finds the multiplier `nu` with `y' clip(a - nu y, 0, C) = 0` by bisection.
pub fn project_feasible(alpha: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let shifted = |nu: f64| -> Vec<f64> {
        alpha
            .iter()
            .zip(y)
            .map(|(&a, &yi)| (a - nu * yi).clamp(0.0, c))
            .collect()
    };
    let residual = |v: &[f64]| -> f64 { v.iter().zip(y).map(|(a, b)| a * b).sum() };

    let clipped = shifted(0.0);
    let r0 = residual(&clipped);
    if r0 == 0.0 || (clipped == alpha && r0.abs() <= 1e-12 * c.max(1.0)) {
        return clipped;
    }
    let span = alpha.iter().fold(c, |m, a| m.max(a.abs())) + c;
    let (mut lo, mut hi) = (-span, span);
    // residual is nonincreasing in nu
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(&shifted(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * span {
            break;
        }
    }
    let mut out = shifted(0.5 * (lo + hi));
    // absorb the rounding residue into one free coordinate when possible
    let r = residual(&out);
    if r != 0.0 {
        if let Some(t) = (0..out.len()).find(|&t| {
            let v = out[t] - r * y[t];
            out[t] > 0.0 && out[t] < c && (0.0..=c).contains(&v)
        }) {
            out[t] -= r * y[t];
        }
    }
    out
}
