//! Multiple kernel learning over the unit simplex.
//!
//! For predefined kernels `K_1..K_n` and weights `d` on the simplex,
//! `J(d)` is the optimal SVM dual value at the mixture `sum_i d_i K_i`.
//! `J` is convex; with `a*` the SVM solution at `d`,
//!
//! ```text
//! dJ/dd_i = -1/2 a*' diag(y) K_i diag(y) a*
//! gap(d)  = max_i a*' diag(y) K_i diag(y) a*  -  a*' diag(y) (sum_i d_i K_i) diag(y) a*
//! ```
//!
//! Two solvers minimize `J`: the analytic center cutting plane method
//! ([`solve_accpm`]) and a reduced-gradient baseline ([`solve_reduced_gradient`]).
//! Both are written against the [`SimplexObjective`] trait so they can also be
//! exercised on closed-form test functions.

mod accpm;
pub mod bench;
mod localization;
mod reduced_gradient;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{GramMatrix, KernelError};
use crate::svm::{Labels, SmoSolver, SvmError, SvmModel, TrainingSet};

pub use accpm::accpm_minimize;
pub use localization::{
    add_cut, add_deep_cut, analytic_center, prune_cuts, Center, CutOrigin, LocalizationSet, CENTERING_TOLERANCE,
};
pub use reduced_gradient::reduced_gradient_minimize;

pub const DEFAULT_GAP_TOLERANCE: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 200;
/// Weights below this are set to zero before renormalizing the final mixture.
pub const WEIGHT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum MklError {
    #[error("no kernels given")]
    NoKernels,
    #[error("kernel {index} has size {got}, expected {expected}")]
    KernelSize { index: usize, expected: usize, got: usize },
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("weights are not on the unit simplex")]
    NotOnSimplex,
    #[error("duality gap {0} is negative; the multipliers are stale")]
    NegativeGap(f64),
    #[error("localization set has an empty or degenerate interior")]
    EmptyInterior,
    #[error("starting point is not strictly inside the localization set")]
    InfeasibleStart,
    #[error("svm: {0}")]
    Svm(#[from] SvmError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
}

/// Unit of the gap compared against `gap_tol`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapScale {
    /// The gap as is.
    #[default]
    Absolute,
    /// The gap divided by `J(d)`. Trace-normalized kernels put `J` on the
    /// order of `l * C`, where an absolute tolerance stops meaning much.
    Relative,
}

/// Kernels, labels and solver settings for one MKL problem.
#[derive(Debug, Clone)]
pub struct MklProblem {
    pub kernels: Vec<GramMatrix>,
    pub labels: Labels,
    pub c: f64,
    pub gap_tol: f64,
    pub max_iters: usize,
    /// KKT tolerance of the inner SVM solves.
    pub svm_tol: f64,
    pub gap_scale: GapScale,
}

impl MklProblem {
    pub fn new(kernels: Vec<GramMatrix>, labels: Labels, c: f64) -> Result<Self, MklError> {
        let first = kernels.first().ok_or(MklError::NoKernels)?;
        let size = first.size();
        for (index, k) in kernels.iter().enumerate() {
            if k.size() != size {
                return Err(MklError::KernelSize {
                    index,
                    expected: size,
                    got: k.size(),
                });
            }
        }
        if labels.len() != size {
            return Err(SvmError::SizeMismatch {
                expected: size,
                got: labels.len(),
            }
            .into());
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(SvmError::InvalidC(c).into());
        }
        Ok(MklProblem {
            kernels,
            labels,
            c,
            gap_tol: DEFAULT_GAP_TOLERANCE,
            max_iters: DEFAULT_MAX_ITERS,
            svm_tol: crate::svm::DEFAULT_TOLERANCE,
            gap_scale: GapScale::Absolute,
        })
    }

    pub fn with_gap_tol(mut self, gap_tol: f64) -> Self {
        self.gap_tol = gap_tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_svm_tol(mut self, svm_tol: f64) -> Self {
        self.svm_tol = svm_tol;
        self
    }

    pub fn with_gap_scale(mut self, gap_scale: GapScale) -> Self {
        self.gap_scale = gap_scale;
        self
    }

    /// `gap` expressed in the unit of `gap_tol`.
    pub fn scaled_gap(&self, gap: f64, value: f64) -> f64 {
        match self.gap_scale {
            GapScale::Absolute => gap,
            GapScale::Relative if value > 0.0 => gap / value,
            GapScale::Relative => gap,
        }
    }

    pub fn n_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    fn check_weights(&self, d: &[f64]) -> Result<(), MklError> {
        if d.len() != self.n_kernels() {
            return Err(MklError::WeightLength {
                expected: self.n_kernels(),
                got: d.len(),
            });
        }
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&w| w < -1e-12 || !w.is_finite()) || (sum - 1.0).abs() > 1e-8 {
            return Err(MklError::NotOnSimplex);
        }
        Ok(())
    }
}

/// Result of evaluating a convex function on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Nonnegative optimality certificate at the evaluated point, in the
    /// unit the solver compares against its tolerance.
    pub gap: f64,
}

/// A convex function of simplex weights with a gradient and a duality gap.
pub trait SimplexObjective {
    fn dimension(&self) -> usize;
    fn evaluate(&mut self, d: &[f64]) -> Result<Evaluation, MklError>;
}

/// How a simplex solver run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MklStatus {
    /// Gap fell below tolerance.
    Converged,
    /// Reduced gradient vanished; the current point is optimal.
    Optimal,
    /// Iteration budget exhausted; the best iterate is returned.
    MaxIterations,
    /// Line search could not decrease the objective; best iterate returned.
    Stalled,
    /// The localization set lost its interior; best iterate returned.
    Collapsed,
}

impl MklStatus {
    pub fn is_success(self) -> bool {
        matches!(self, MklStatus::Converged | MklStatus::Optimal)
    }
}

/// Raw output of a simplex solver, before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexRun {
    pub weights: Vec<f64>,
    pub value: f64,
    pub gap: f64,
    pub iterations: usize,
    pub status: MklStatus,
    /// Gap at every evaluated iterate, in order, in tolerance units.
    pub gap_history: Vec<f64>,
    pub value_history: Vec<f64>,
    /// Number of constraints in the localization set after each ACCPM iteration.
    pub constraint_history: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MklSolution {
    pub weights: Vec<f64>,
    pub model: SvmModel,
    pub objective: f64,
    /// Absolute gap at the returned weights.
    pub gap: f64,
    /// `gap / objective`.
    pub relative_gap: f64,
    pub iterations: usize,
    pub svm_solves: usize,
    pub status: MklStatus,
    pub gap_history: Vec<f64>,
}

impl MklSolution {
    pub fn active_kernels(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// `q_i = (y∘a)' K_i (y∘a)` for every kernel, using only the support of `a`.
pub fn quadratic_terms(problem: &MklProblem, alpha: &[f64]) -> Result<Vec<f64>, MklError> {
    if alpha.len() != problem.size() {
        return Err(SvmError::SizeMismatch {
            expected: problem.size(),
            got: alpha.len(),
        }
        .into());
    }
    let y = problem.labels.as_slice();
    let support: Vec<(usize, f64)> = alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0.0)
        .map(|(i, &a)| (i, a * y[i]))
        .collect();
    Ok(problem
        .kernels
        .iter()
        .map(|k| {
            support
                .iter()
                .map(|&(i, vi)| {
                    let row = k.row(i);
                    vi * support.iter().map(|&(j, vj)| row[j] * vj).sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// Gradient of `J` from the optimal multipliers at the current mixture.
pub fn mkl_gradient(problem: &MklProblem, alpha: &[f64]) -> Result<Vec<f64>, MklError> {
    Ok(quadratic_terms(problem, alpha)?.into_iter().map(|q| -0.5 * q).collect())
}

fn gap_from_terms(q: &[f64], d: &[f64]) -> f64 {
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mixed: f64 = q.iter().zip(d).map(|(a, b)| a * b).sum();
    max - mixed
}

/// Duality gap at weights `d` with multipliers `alpha` optimal for that mixture.
pub fn duality_gap(problem: &MklProblem, d: &[f64], alpha: &[f64]) -> Result<f64, MklError> {
    problem.check_weights(d)?;
    let q = quadratic_terms(problem, alpha)?;
    let gap = gap_from_terms(&q, d);
    let scale = q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if gap < -1e-10 * scale {
        return Err(MklError::NegativeGap(gap));
    }
    Ok(gap.max(0.0))
}

/// SVM-backed evaluator of `J(d)`: mixes kernels, solves one warm-started SVM
/// per call and counts the solves.
pub struct MklOracle<'a> {
    problem: &'a MklProblem,
    mixed: GramMatrix,
    warm: Option<Vec<f64>>,
    svm_solves: usize,
    last: Option<(Vec<f64>, SvmModel)>,
}

impl<'a> MklOracle<'a> {
    pub fn new(problem: &'a MklProblem) -> Self {
        MklOracle {
            problem,
            mixed: problem.kernels[0].clone(),
            warm: None,
            svm_solves: 0,
            last: None,
        }
    }

    pub fn svm_solves(&self) -> usize {
        self.svm_solves
    }

    /// `J(d)` and the maximizing SVM model.
    pub fn objective(&mut self, d: &[f64]) -> Result<(f64, SvmModel), MklError> {
        self.problem.check_weights(d)?;
        if let Some((last_d, model)) = &self.last {
            if last_d.as_slice() == d {
                return Ok((model.objective, model.clone()));
            }
        }
        self.mixed.assign_weighted_sum(&self.problem.kernels, d)?;
        let ts = TrainingSet::new(&self.mixed, &self.problem.labels)?;
        let solver = SmoSolver::new(self.problem.c, self.problem.svm_tol);
        let model = solver.solve(ts, self.warm.as_deref())?;
        self.svm_solves += 1;
        self.warm = Some(model.alpha.clone());
        self.last = Some((d.to_vec(), model.clone()));
        Ok((model.objective, model))
    }

    /// Model from the most recent solve at exactly `d`, if any.
    pub fn model_at(&self, d: &[f64]) -> Option<&SvmModel> {
        self.last
            .as_ref()
            .filter(|(last_d, _)| last_d.as_slice() == d)
            .map(|(_, m)| m)
    }
}

impl SimplexObjective for MklOracle<'_> {
    fn dimension(&self) -> usize {
        self.problem.n_kernels()
    }

    fn evaluate(&mut self, d: &[f64]) -> Result<Evaluation, MklError> {
        let (value, model) = self.objective(d)?;
        let q = quadratic_terms(self.problem, &model.alpha)?;
        let gap = gap_from_terms(&q, d).max(0.0);
        Ok(Evaluation {
            value,
            gradient: q.into_iter().map(|v| -0.5 * v).collect(),
            gap: self.problem.scaled_gap(gap, value),
        })
    }
}

/// `J(d)` with its maximizer, as a one-off evaluation.
pub fn mkl_objective(problem: &MklProblem, d: &[f64]) -> Result<(f64, Vec<f64>), MklError> {
    let mut oracle = MklOracle::new(problem);
    let (value, model) = oracle.objective(d)?;
    Ok((value, model.alpha))
}

/// Zeroes weights below [`WEIGHT_THRESHOLD`] and renormalizes.
pub fn threshold_weights(d: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = d.iter().map(|&w| if w < WEIGHT_THRESHOLD { 0.0 } else { w }).collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|w| *w /= sum);
        out
    } else {
        d.to_vec()
    }
}

fn finish(problem: &MklProblem, mut oracle: MklOracle<'_>, run: SimplexRun) -> Result<MklSolution, MklError> {
    let weights = threshold_weights(&run.weights);
    let (objective, model) = oracle.objective(&weights)?;
    let gap = duality_gap(problem, &weights, &model.alpha)?;
    Ok(MklSolution {
        weights,
        model,
        objective,
        gap,
        relative_gap: if objective > 0.0 { gap / objective } else { gap },
        iterations: run.iterations,
        svm_solves: oracle.svm_solves(),
        status: run.status,
        gap_history: run.gap_history,
    })
}

/// Minimizes `J` over the simplex with the analytic center cutting plane method.
pub fn solve_accpm(problem: &MklProblem) -> Result<MklSolution, MklError> {
    let mut oracle = MklOracle::new(problem);
    let run = accpm_minimize(&mut oracle, problem.gap_tol, problem.max_iters)?;
    finish(problem, oracle, run)
}

/// Minimizes `J` over the simplex by reduced-gradient descent with a golden-section line search.
pub fn solve_reduced_gradient(problem: &MklProblem) -> Result<MklSolution, MklError> {
    let mut oracle = MklOracle::new(problem);
    let run = reduced_gradient_minimize(&mut oracle, problem.gap_tol, problem.max_iters)?;
    finish(problem, oracle, run)
}

/// Maps reduced coordinates `x` (length n-1) to `d = (x, 1 - sum x)`.
pub(crate) fn lift(x: &[f64]) -> Vec<f64> {
    let mut d = x.to_vec();
    d.push(1.0 - x.iter().sum::<f64>());
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, KernelSpec};
    use crate::svm::solve_dual;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_problem(seed: u64, l: usize) -> MklProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..l)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| if x[0] * x[1] + 0.3 * x[2] > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let kernels = vec![
            gram_matrix(&KernelSpec::linear().normalized(), &xs).unwrap(),
            gram_matrix(&KernelSpec::gaussian(1.0).unwrap().normalized(), &xs).unwrap(),
        ];
        MklProblem::new(kernels, Labels::new(y).unwrap(), 10.0)
            .unwrap()
            .with_svm_tol(1e-9)
    }

    #[test]
    fn single_kernel_objective_is_plain_svm() {
        let p = toy_problem(1, 20);
        let single = MklProblem::new(vec![p.kernels[1].clone()], p.labels.clone(), p.c)
            .unwrap()
            .with_svm_tol(1e-9);
        let (j, _) = mkl_objective(&single, &[1.0]).unwrap();
        let ts = TrainingSet::new(&p.kernels[1], &p.labels).unwrap();
        let direct = solve_dual(ts, p.c, 1e-9, None).unwrap();
        assert_relative_eq!(j, direct.objective, max_relative = 1e-12);
        assert_eq!(duality_gap(&single, &[1.0], &direct.alpha).unwrap(), 0.0);
    }

    #[test]
    fn identical_kernels_flat_objective_and_zero_gap() {
        let p = toy_problem(2, 20);
        let twin = MklProblem::new(vec![p.kernels[0].clone(), p.kernels[0].clone()], p.labels.clone(), p.c)
            .unwrap()
            .with_svm_tol(1e-9);
        let (j0, _) = mkl_objective(&twin, &[1.0, 0.0]).unwrap();
        for w in [0.1, 0.5, 0.93] {
            let d = [w, 1.0 - w];
            let (j, alpha) = mkl_objective(&twin, &d).unwrap();
            assert_relative_eq!(j, j0, max_relative = 1e-8);
            assert!(duality_gap(&twin, &d, &alpha).unwrap() <= 1e-8 * j0.abs());
            let g = mkl_gradient(&twin, &alpha).unwrap();
            assert_relative_eq!(g[0], g[1], max_relative = 1e-12);
        }
    }

    #[test]
    fn mixed_objective_matches_premixed_solve() {
        let p = toy_problem(3, 20);
        let d = [0.3, 0.7];
        let (j, _) = mkl_objective(&p, &d).unwrap();
        let mixed = GramMatrix::weighted_sum(&p.kernels, &d).unwrap();
        let direct = solve_dual(TrainingSet::new(&mixed, &p.labels).unwrap(), p.c, 1e-9, None).unwrap();
        assert_relative_eq!(j, direct.objective, max_relative = 1e-6);
    }

    #[test]
    fn gradient_at_zero_multipliers() {
        let p = toy_problem(4, 10);
        assert_eq!(mkl_gradient(&p, &[0.0; 10]).unwrap(), vec![0.0, 0.0]);
        assert!(mkl_gradient(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn gap_rejects_bad_weights() {
        let p = toy_problem(5, 10);
        let a = vec![0.0; 10];
        assert_eq!(
            duality_gap(&p, &[0.5], &a),
            Err(MklError::WeightLength { expected: 2, got: 1 })
        );
        assert_eq!(duality_gap(&p, &[0.7, 0.7], &a), Err(MklError::NotOnSimplex));
    }

    #[test]
    fn oracle_counts_and_caches_solves() {
        let p = toy_problem(6, 15);
        let mut oracle = MklOracle::new(&p);
        oracle.evaluate(&[0.5, 0.5]).unwrap();
        oracle.evaluate(&[0.5, 0.5]).unwrap();
        assert_eq!(oracle.svm_solves(), 1);
        oracle.evaluate(&[0.2, 0.8]).unwrap();
        assert_eq!(oracle.svm_solves(), 2);
        assert!(oracle.model_at(&[0.2, 0.8]).is_some());
    }

    #[test]
    fn thresholding_renormalizes() {
        let t = threshold_weights(&[0.5, 0.49995, 0.00005]);
        assert_eq!(t[2], 0.0);
        assert_relative_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn problem_validation() {
        let p = toy_problem(7, 10);
        let small = GramMatrix::identity(3);
        assert!(matches!(
            MklProblem::new(vec![p.kernels[0].clone(), small], p.labels.clone(), 1.0),
            Err(MklError::KernelSize { index: 1, .. })
        ));
        assert_eq!(
            MklProblem::new(vec![], p.labels.clone(), 1.0).unwrap_err(),
            MklError::NoKernels
        );
    }
}
