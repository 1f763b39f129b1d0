//! Analytic center cutting plane method on the simplex.

use nalgebra::DVector;

use super::localization::{add_deep_cut, analytic_center, prune_cuts, LocalizationSet};
use super::{lift, MklError, MklStatus, SimplexObjective, SimplexRun};

/// Runs ACCPM on `objective` until its gap is at most `gap_tol`.
///
/// Each iteration centers the localization set, evaluates the objective once
/// at the center and cuts with the gradient. Once the set holds more than `3n`
/// constraints it is pruned at the current center and recentered before the
/// evaluation. One objective evaluation per iteration.
pub fn accpm_minimize<O: SimplexObjective>(
    objective: &mut O,
    gap_tol: f64,
    max_iters: usize,
) -> Result<SimplexRun, MklError> {
    let n = objective.dimension();
    if n == 0 {
        return Err(MklError::NoKernels);
    }
    let mut run = SimplexRun {
        weights: vec![1.0 / n as f64; n],
        value: f64::INFINITY,
        gap: f64::INFINITY,
        iterations: 0,
        status: MklStatus::MaxIterations,
        gap_history: Vec::new(),
        value_history: Vec::new(),
        constraint_history: Vec::new(),
    };

    if n == 1 {
        let eval = objective.evaluate(&[1.0])?;
        run.weights = vec![1.0];
        run.value = eval.value;
        run.gap = eval.gap;
        run.iterations = 1;
        run.status = MklStatus::Converged;
        run.gap_history.push(eval.gap);
        run.value_history.push(eval.value);
        return Ok(run);
    }

    let budget = 3 * n;
    let mut set = LocalizationSet::simplex(n);
    let mut start = vec![1.0 / n as f64; n - 1];
    let mut best: Option<(Vec<f64>, f64, f64)> = None;

    for iter in 1..=max_iters.max(1) {
        let mut center = match analytic_center(&set, &start) {
            Ok(c) => c,
            Err(MklError::EmptyInterior) | Err(MklError::InfeasibleStart) => {
                log::debug!("accpm: localization set collapsed at iteration {iter}");
                run.status = MklStatus::Collapsed;
                break;
            }
            Err(e) => return Err(e),
        };
        if set.len() > budget {
            prune_cuts(&mut set, &center.point, &center.hessian, budget);
            center = match analytic_center(&set, &center.point) {
                Ok(c) => c,
                Err(MklError::EmptyInterior) | Err(MklError::InfeasibleStart) => {
                    run.status = MklStatus::Collapsed;
                    break;
                }
                Err(e) => return Err(e),
            };
        }
        run.constraint_history.push(set.len());
        let d = lift(&center.point);
        let eval = objective.evaluate(&d)?;
        run.iterations = iter;
        run.gap_history.push(eval.gap);
        run.value_history.push(eval.value);
        log::trace!("accpm iter {iter}: J = {:.6e}, gap = {:.3e}", eval.value, eval.gap);

        if best.as_ref().is_none_or(|(_, v, _)| eval.value < *v) {
            best = Some((d.clone(), eval.value, eval.gap));
        }
        if eval.gap <= gap_tol {
            run.weights = d;
            run.value = eval.value;
            run.gap = eval.gap;
            run.status = MklStatus::Converged;
            return Ok(run);
        }

        let last = eval.gradient[n - 1];
        let reduced: Vec<f64> = eval.gradient[..n - 1].iter().map(|g| g - last).collect();
        let scale = eval.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if reduced.iter().all(|r| r.abs() <= 1e-15 * scale) {
            run.weights = d;
            run.value = eval.value;
            run.gap = eval.gap;
            run.status = MklStatus::Optimal;
            return Ok(run);
        }
        let norm = reduced.iter().map(|r| r * r).sum::<f64>().sqrt();
        let a = DVector::from_iterator(n - 1, reduced.iter().map(|r| r / norm));
        let step = match center.hessian.clone().cholesky() {
            Some(chol) => chol.solve(&a),
            None => {
                run.status = MklStatus::Collapsed;
                break;
            }
        };
        let radius = a.dot(&step).max(f64::MIN_POSITIVE).sqrt();

        // deep cut at the best value seen, capped so the restart point below
        // stays strictly feasible inside the Dikin ellipsoid
        let best_value = best.as_ref().map_or(eval.value, |(_, v, _)| *v);
        let depth = ((eval.value - best_value) / norm).min(0.5 * radius);
        add_deep_cut(&mut set, &center.point, &reduced, depth * norm);

        let t = 0.75 / radius;
        start = center.point.iter().zip(step.iter()).map(|(x, s)| x - t * s).collect();
    }

    if let Some((d, value, gap)) = best {
        run.weights = d;
        run.value = value;
        run.gap = gap;
    }
    Ok(run)
}
