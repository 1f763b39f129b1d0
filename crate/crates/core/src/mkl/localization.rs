//! Polyhedral localization sets `{x : A x <= b}` in reduced simplex
//! coordinates and their analytic centers.
//!
//! With `n` kernels the weights are parameterized as `d = (x, 1 - sum x)`,
//! `x` in `R^{n-1}`, so the simplex becomes the `n` inequalities `-x_k <= 0`
//! and `sum x <= 1`.

use nalgebra::{DMatrix, DVector};

use super::MklError;

/// Newton decrement at which centering stops.
pub const CENTERING_TOLERANCE: f64 = 1e-8;
const LINE_SEARCH_ALPHA: f64 = 0.25;
const LINE_SEARCH_BETA: f64 = 0.5;
const MAX_NEWTON_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutOrigin {
    SimplexFace,
    ObjectiveCut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    origins: Vec<CutOrigin>,
}

impl LocalizationSet {
    /// The simplex over `n_kernels` weights, in `n_kernels - 1` coordinates.
    pub fn simplex(n_kernels: usize) -> Self {
        let dim = n_kernels.saturating_sub(1);
        let mut set = LocalizationSet {
            dim,
            rows: Vec::with_capacity(3 * n_kernels + 1),
            rhs: Vec::new(),
            origins: Vec::new(),
        };
        if dim == 0 {
            return set;
        }
        for k in 0..dim {
            let mut row = vec![0.0; dim];
            row[k] = -1.0;
            set.push(row, 0.0, CutOrigin::SimplexFace);
        }
        set.push(vec![1.0; dim], 1.0, CutOrigin::SimplexFace);
        set
    }

    /// Arbitrary polytope with explicit row origins.
    pub fn from_parts(rows: Vec<Vec<f64>>, rhs: Vec<f64>, origins: Vec<CutOrigin>) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == dim));
        assert_eq!(rows.len(), rhs.len());
        assert_eq!(rows.len(), origins.len());
        LocalizationSet {
            dim,
            rows,
            rhs,
            origins,
        }
    }

    fn push(&mut self, row: Vec<f64>, rhs: f64, origin: CutOrigin) {
        self.rows.push(row);
        self.rhs.push(rhs);
        self.origins.push(origin);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn origins(&self) -> &[CutOrigin] {
        &self.origins
    }

    pub fn n_cuts(&self) -> usize {
        self.origins.iter().filter(|&&o| o == CutOrigin::ObjectiveCut).count()
    }

    /// `b_i - a_i' x` for every row.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| b - a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect()
    }

    pub fn strictly_contains(&self, x: &[f64]) -> bool {
        self.slacks(x).iter().all(|&s| s > 0.0)
    }

    /// Barrier Hessian `A' diag(1/s^2) A` at `x`.
    pub fn barrier_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let s = self.slacks(x);
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (a, si) in self.rows.iter().zip(&s) {
            let w = 1.0 / (si * si);
            for p in 0..self.dim {
                for q in 0..self.dim {
                    h[(p, q)] += w * a[p] * a[q];
                }
            }
        }
        h
    }

    fn potential(&self, x: &[f64]) -> f64 {
        let s = self.slacks(x);
        if s.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        -s.iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Analytic center with the barrier Hessian there.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub point: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub newton_steps: usize,
    pub decrement: f64,
    /// `sum_i log s_i` at the center.
    pub log_slack_sum: f64,
}

/// Minimizes `-sum log(b_i - a_i' x)` by damped Newton from a strictly
/// feasible `start`.
pub fn analytic_center(set: &LocalizationSet, start: &[f64]) -> Result<Center, MklError> {
    let dim = set.dim();
    if start.len() != dim || !set.strictly_contains(start) {
        return Err(MklError::InfeasibleStart);
    }
    let mut x = start.to_vec();
    let mut steps = 0;
    loop {
        let s = set.slacks(&x);
        let mut g = DVector::zeros(dim);
        for (a, si) in set.rows().iter().zip(&s) {
            for p in 0..dim {
                g[p] += a[p] / si;
            }
        }
        let h = set.barrier_hessian(&x);
        let chol = h.clone().cholesky().ok_or(MklError::EmptyInterior)?;
        let dx = -chol.solve(&g);
        let decrement = (-g.dot(&dx)).max(0.0).sqrt();
        if !decrement.is_finite() {
            return Err(MklError::EmptyInterior);
        }
        if decrement <= CENTERING_TOLERANCE || steps >= MAX_NEWTON_STEPS {
            if decrement > 1e-5 {
                return Err(MklError::EmptyInterior);
            }
            let log_slack_sum = s.iter().map(|v| v.ln()).sum();
            return Ok(Center {
                point: x,
                hessian: h,
                newton_steps: steps,
                decrement,
                log_slack_sum,
            });
        }

        let f0 = -s.iter().map(|v| v.ln()).sum::<f64>();
        let slope = g.dot(&dx);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + t * b).collect();
            let f1 = set.potential(&trial);
            if f1.is_finite() && f1 <= f0 + LINE_SEARCH_ALPHA * t * slope {
                x = trial;
                accepted = true;
                break;
            }
            t *= LINE_SEARCH_BETA;
        }
        steps += 1;
        if !accepted {
            // rounding floor reached
            if decrement <= 1e-5 {
                let log_slack_sum = s.iter().map(|v| v.ln()).sum();
                return Ok(Center {
                    point: x,
                    hessian: h,
                    newton_steps: steps,
                    decrement,
                    log_slack_sum,
                });
            }
            return Err(MklError::EmptyInterior);
        }
    }
}

/// Appends the cut `{x : g'(x - center) <= 0}` for a reduced gradient `g`.
///
/// By convexity the kept halfspace contains every point whose objective does
/// not exceed the value at `center`. Returns `false` (set unchanged) when the
/// gradient is zero, which certifies optimality.
pub fn add_cut(set: &mut LocalizationSet, center: &[f64], reduced_gradient: &[f64]) -> bool {
    add_deep_cut(set, center, reduced_gradient, 0.0)
}

/// Appends `{x : g'(x - center) <= -excess}` where `excess = J(center) - J_best >= 0`.
///
/// Every point with `J(x) <= J_best` satisfies it, so the cut stays valid
/// while removing more of the set than the central cut.
pub fn add_deep_cut(set: &mut LocalizationSet, center: &[f64], reduced_gradient: &[f64], excess: f64) -> bool {
    assert_eq!(center.len(), set.dim());
    assert_eq!(reduced_gradient.len(), set.dim());
    let norm = reduced_gradient.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    let row: Vec<f64> = reduced_gradient.iter().map(|v| v / norm).collect();
    let rhs = row.iter().zip(center).map(|(a, b)| a * b).sum::<f64>() - excess.max(0.0) / norm;
    set.push(row, rhs, CutOrigin::ObjectiveCut);
    true
}

/// Relevance `a' H^{-1} a / (a'x - b)^2` of every row at `center`.
///
/// Rows with zero slack (a cut through `center`) are infinitely relevant.
pub fn relevance_scores(set: &LocalizationSet, center: &[f64], hessian: &DMatrix<f64>) -> Vec<f64> {
    let chol = hessian.clone().cholesky();
    let slacks = set.slacks(center);
    set.rows()
        .iter()
        .zip(&slacks)
        .map(|(a, &s)| {
            let av = DVector::from_column_slice(a);
            let quad = match &chol {
                Some(c) => av.dot(&c.solve(&av)),
                None => f64::INFINITY,
            };
            if s <= 0.0 {
                f64::INFINITY
            } else {
                quad / (s * s)
            }
        })
        .collect()
}

/// Keeps at most `budget` rows: every simplex face and the newest objective
/// cut, then the most relevant remaining cuts. Ties keep the earlier row.
/// Row order is preserved.
pub fn prune_cuts(set: &mut LocalizationSet, center: &[f64], hessian: &DMatrix<f64>, budget: usize) {
    if set.len() <= budget {
        return;
    }
    let scores = relevance_scores(set, center, hessian);
    let faces = set.origins.iter().filter(|&&o| o == CutOrigin::SimplexFace).count();
    let mut cuts: Vec<usize> = (0..set.len())
        .filter(|&i| set.origins[i] == CutOrigin::ObjectiveCut)
        .collect();
    let newest = cuts.pop();
    let cut_budget = budget.saturating_sub(faces + newest.is_some() as usize);
    // stable: equal scores keep index order
    cuts.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep = vec![false; set.len()];
    for (i, origin) in set.origins.iter().enumerate() {
        if *origin == CutOrigin::SimplexFace {
            keep[i] = true;
        }
    }
    for &i in cuts.iter().take(cut_budget).chain(newest.iter()) {
        keep[i] = true;
    }
    let mut idx = 0;
    set.rows.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    idx = 0;
    set.rhs.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    idx = 0;
    set.origins.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
}
