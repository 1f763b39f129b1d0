//! Reduced-gradient descent on the simplex, SimpleMKL style.
//!
//! Each outer iteration checks the gap, builds the reduced-gradient direction
//! against the largest weight, follows it to the simplex boundary for as long
//! as the objective keeps decreasing (dropping one kernel per step), then
//! refines the step length by golden-section search. Every trial point costs
//! one objective evaluation.

use super::{Evaluation, MklError, MklStatus, SimplexObjective, SimplexRun};

const GOLDEN: f64 = 1.618_033_988_749_895;
/// Golden-section search stops once the bracket is this fraction of the maximal step.
const LINE_SEARCH_TOL: f64 = 0.1;
/// Bracket fraction below which the search gives up when nothing improved on the base.
const LINE_SEARCH_MIN: f64 = 1e-12;

pub fn reduced_gradient_minimize<O: SimplexObjective>(
    objective: &mut O,
    gap_tol: f64,
    max_iters: usize,
) -> Result<SimplexRun, MklError> {
    let n = objective.dimension();
    if n == 0 {
        return Err(MklError::NoKernels);
    }
    let mut d = vec![1.0 / n as f64; n];
    let mut eval = objective.evaluate(&d)?;
    let mut run = SimplexRun {
        weights: d.clone(),
        value: eval.value,
        gap: eval.gap,
        iterations: 0,
        status: MklStatus::MaxIterations,
        gap_history: vec![eval.gap],
        value_history: vec![eval.value],
        constraint_history: Vec::new(),
    };

    loop {
        run.iterations += 1;
        if eval.gap <= gap_tol {
            run.status = MklStatus::Converged;
            break;
        }
        if run.iterations > max_iters {
            run.iterations = max_iters;
            break;
        }
        let direction = descent_direction(&d, &eval.gradient);
        if !is_descent(&direction, &eval.gradient) {
            run.status = MklStatus::Optimal;
            break;
        }

        let start_value = eval.value;
        let (mut base, mut base_eval, mut dir) = (d.clone(), eval.clone(), direction);

        // follow the direction to the boundary while the objective decreases
        let (mut step_max, mut trial) = max_step(&base, &dir);
        let mut trial_eval = objective.evaluate(&trial)?;
        while trial_eval.value < base_eval.value {
            base = trial;
            base_eval = trial_eval;
            dir = descent_direction(&base, &base_eval.gradient);
            if !is_descent(&dir, &base_eval.gradient) {
                break;
            }
            (step_max, trial) = max_step(&base, &dir);
            trial_eval = objective.evaluate(&trial)?;
        }

        // golden-section search on [0, step_max] along `dir` from `base`
        let (best, best_eval) = if is_descent(&dir, &base_eval.gradient) && step_max > 0.0 {
            golden_section(objective, &base, base_eval, &dir, step_max)?
        } else {
            (base, base_eval)
        };

        if best_eval.value >= start_value {
            log::debug!("reduced gradient: no decrease found at gap {:.3e}", eval.gap);
            run.status = MklStatus::Stalled;
            break;
        }
        d = best;
        eval = best_eval;
        run.gap_history.push(eval.gap);
        run.value_history.push(eval.value);
    }

    run.weights = d;
    run.value = eval.value;
    run.gap = eval.gap;
    Ok(run)
}

fn is_descent(direction: &[f64], gradient: &[f64]) -> bool {
    direction.iter().any(|&v| v != 0.0) && direction.iter().zip(gradient).map(|(a, b)| a * b).sum::<f64>() < 0.0
}

/// Largest feasible step along `dir` and the boundary point it reaches.
fn max_step(d: &[f64], dir: &[f64]) -> (f64, Vec<f64>) {
    let (step, blocking) = dir
        .iter()
        .zip(d)
        .enumerate()
        .filter(|(_, (&v, _))| v < 0.0)
        .map(|(m, (&v, &w))| (-w / v, m))
        .fold((f64::INFINITY, usize::MAX), |acc, v| if v.0 < acc.0 { v } else { acc });
    let mut point = along(d, dir, step);
    if blocking != usize::MAX {
        point[blocking] = 0.0;
        normalize(&mut point);
    }
    (step, point)
}

fn along(d: &[f64], dir: &[f64], step: f64) -> Vec<f64> {
    let mut p: Vec<f64> = d.iter().zip(dir).map(|(w, v)| (w + step * v).max(0.0)).collect();
    normalize(&mut p);
    p
}

fn normalize(p: &mut [f64]) {
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|w| *w /= sum);
}

/// Golden-section search for the step minimizing the objective on
/// `[0, step_max]`. Returns the best point seen, `base` included.
fn golden_section<O: SimplexObjective>(
    objective: &mut O,
    base: &[f64],
    base_eval: Evaluation,
    dir: &[f64],
    step_max: f64,
) -> Result<(Vec<f64>, Evaluation), MklError> {
    let base_value = base_eval.value;
    let mut best = (base.to_vec(), base_eval);
    let (mut lo, mut hi) = (0.0, step_max);
    let mut left = hi - (hi - lo) / GOLDEN;
    let mut right = lo + (hi - lo) / GOLDEN;
    let mut left_eval = objective.evaluate(&along(base, dir, left))?;
    let mut right_eval = objective.evaluate(&along(base, dir, right))?;
    for (step, e) in [(left, &left_eval), (right, &right_eval)] {
        if e.value < best.1.value {
            best = (along(base, dir, step), e.clone());
        }
    }
    // keep shrinking past the usual tolerance while the base is still the best point
    while hi - lo > LINE_SEARCH_TOL * step_max || (best.1.value >= base_value && hi - lo > LINE_SEARCH_MIN * step_max) {
        if left_eval.value <= right_eval.value {
            hi = right;
            right = left;
            right_eval = left_eval;
            left = hi - (hi - lo) / GOLDEN;
            left_eval = objective.evaluate(&along(base, dir, left))?;
            if left_eval.value < best.1.value {
                best = (along(base, dir, left), left_eval.clone());
            }
        } else {
            lo = left;
            left = right;
            left_eval = right_eval;
            right = lo + (hi - lo) / GOLDEN;
            right_eval = objective.evaluate(&along(base, dir, right))?;
            if right_eval.value < best.1.value {
                best = (along(base, dir, right), right_eval.clone());
            }
        }
    }
    Ok(best)
}

/// Feasible descent direction from the gradient reduced against the largest weight.
fn descent_direction(d: &[f64], gradient: &[f64]) -> Vec<f64> {
    let mu = d
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > d[best] { i } else { best });
    let mut dir = vec![0.0; d.len()];
    let mut total = 0.0;
    for m in 0..d.len() {
        if m == mu {
            continue;
        }
        let r = gradient[m] - gradient[mu];
        if d[m] <= 0.0 && r > 0.0 {
            continue;
        }
        dir[m] = -r;
        total += r;
    }
    dir[mu] = total;
    dir
}
