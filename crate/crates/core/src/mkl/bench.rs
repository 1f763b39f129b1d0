//! Seeded synthetic kernel sets and solver benchmarking.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{solve_accpm, solve_reduced_gradient, GapScale, MklError, MklProblem, MklSolution};
use crate::kernels::{gram_matrix, median_squared_distance, GramMatrix, KernelSpec};
use crate::svm::Labels;

/// Feature dimension of generated samples.
pub const FEATURE_DIM: usize = 5;
const LABEL_NOISE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BenchMethod {
    #[serde(rename = "accpm")]
    Accpm,
    #[serde(rename = "redgrad")]
    ReducedGradient,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Accpm => "accpm",
            BenchMethod::ReducedGradient => "redgrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "accpm" => Some(BenchMethod::Accpm),
            "redgrad" | "reduced-gradient" | "reduced_gradient" => Some(BenchMethod::ReducedGradient),
            _ => None,
        }
    }

    pub fn solve(self, problem: &MklProblem) -> Result<MklSolution, MklError> {
        match self {
            BenchMethod::Accpm => solve_accpm(problem),
            BenchMethod::ReducedGradient => solve_reduced_gradient(problem),
        }
    }
}

/// Kernel specs of an `n`-kernel set: one linear kernel, then gaussian and
/// polynomial kernels alternating over a widening parameter ladder.
pub fn kernel_ladder(n_kernels: usize, median_sq_dist: f64) -> Vec<KernelSpec> {
    const SIGMA_MULTIPLES: [f64; 6] = [1.0, 2.0, 0.5, 4.0, 0.25, 8.0];
    let mut specs = vec![KernelSpec::linear().normalized()];
    let (mut g, mut p) = (0usize, 0usize);
    while specs.len() < n_kernels {
        if specs.len() % 2 == 1 {
            let mult = SIGMA_MULTIPLES[g % SIGMA_MULTIPLES.len()] * 2f64.powi((g / SIGMA_MULTIPLES.len()) as i32);
            specs.push(
                KernelSpec::gaussian(mult * median_sq_dist)
                    .expect("positive sigma")
                    .normalized(),
            );
            g += 1;
        } else {
            specs.push(KernelSpec::polynomial(2 + p as u32).expect("degree >= 1").normalized());
            p += 1;
        }
    }
    specs
}

/// Samples, trace-normalized kernels and labels.
pub type Instance = (Vec<Vec<f64>>, Vec<GramMatrix>, Labels);

/// Samples, labels and trace-normalized kernels of one seeded instance.
///
/// Labels follow a noisy rule with both a linear and a radial component,
/// so the best mixture usually puts weight on more than one kernel.
pub fn synthetic_instance(seed: u64, n_kernels: usize, size: usize) -> Result<Instance, MklError> {
    if n_kernels == 0 {
        return Err(MklError::NoKernels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..size)
        .map(|_| (0..FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut y: Vec<f64> = samples
        .iter()
        .map(|x| {
            let radial = x[0] * x[0] + x[1] * x[1] - 1.4;
            let linear = 0.8 * x[2] - 0.4 * x[3];
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * LABEL_NOISE;
            if radial + linear + noise > 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    if y.iter().all(|&v| v == y[0]) && size > 1 {
        y[0] = -y[0];
    }
    let labels = Labels::new(y)?;
    let median = median_squared_distance(&samples);
    let kernels = kernel_ladder(n_kernels, median)
        .iter()
        .map(|spec| gram_matrix(spec, &samples))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, kernels, labels))
}

/// One line of the benchmark CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub run: u64,
    pub method: BenchMethod,
    pub n_kernels: usize,
    pub kernel_dim: usize,
    pub iterations: usize,
    pub svm_solves: usize,
    pub wall_time: f64,
    pub final_gap: f64,
    #[serde(rename = "final_J")]
    pub final_j: f64,
    pub n_active: usize,
}

pub const CSV_HEADER: &str =
    "run,method,n_kernels,kernel_dim,iterations,svm_solves,wall_time,final_gap,final_J,n_active";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6e},{:.10e},{}",
            self.run,
            self.method.name(),
            self.n_kernels,
            self.kernel_dim,
            self.iterations,
            self.svm_solves,
            self.wall_time,
            self.final_gap,
            self.final_j,
            self.n_active
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_kernels: usize,
    pub size: usize,
    pub runs: usize,
    pub seed: u64,
    pub c: f64,
    pub gap_tol: f64,
    pub gap_scale: GapScale,
    pub max_iters: usize,
    pub svm_tol: f64,
    pub methods: Vec<BenchMethod>,
}

/// Runs every method on `runs` seeded instances; rows ordered by run, then method.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>, MklError> {
    let mut rows = Vec::new();
    for run in 0..config.runs as u64 {
        let (_, kernels, labels) = synthetic_instance(config.seed.wrapping_add(run), config.n_kernels, config.size)?;
        let problem = MklProblem::new(kernels, labels, config.c)?
            .with_gap_tol(config.gap_tol)
            .with_gap_scale(config.gap_scale)
            .with_max_iters(config.max_iters)
            .with_svm_tol(config.svm_tol);
        for &method in &config.methods {
            let start = Instant::now();
            let sol = method.solve(&problem)?;
            rows.push(BenchRow {
                run,
                method,
                n_kernels: config.n_kernels,
                kernel_dim: config.size,
                iterations: sol.iterations,
                svm_solves: sol.svm_solves,
                wall_time: start.elapsed().as_secs_f64(),
                final_gap: problem.scaled_gap(sol.gap, sol.objective),
                final_j: sol.objective,
                n_active: sol.active_kernels(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_sizes() {
        for n in [1, 3, 7, 13] {
            let specs = kernel_ladder(n, 2.0);
            assert_eq!(specs.len(), n);
            assert!(specs.iter().all(|s| s.trace_normalize));
        }
    }

    #[test]
    fn instance_is_seeded() {
        let (_, a, la) = synthetic_instance(3, 3, 30).unwrap();
        let (_, b, lb) = synthetic_instance(3, 3, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        for k in &a {
            assert!((k.trace() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [BenchMethod::Accpm, BenchMethod::ReducedGradient] {
            assert_eq!(BenchMethod::parse(m.name()), Some(m));
        }
        assert_eq!(BenchMethod::parse("silp"), None);
    }
}
