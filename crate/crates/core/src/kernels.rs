//! Kernel functions and dense Gram matrices.
//!
//! Every kernel used by the solvers is materialized as a [`GramMatrix`] over
//! the training samples. Trace normalization rescales a matrix to unit trace
//! and remembers the factor so that prediction-time kernel rows can be put on
//! the same scale.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when checking Mercer's condition.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("bag-of-words kernel is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("identity kernel is defined on training indices only, not raw vectors")]
    IdentityOnRawVectors,
    #[error("empty sample list")]
    Empty,
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not square: {rows} rows, row {row} has {len} entries")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
}

/// Kernel family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    /// `exp(-||x - y||^2 / sigma)`; sigma scales the squared distance directly.
    Gaussian {
        sigma: f64,
    },
    /// `(<x, y> + 1)^degree`
    Polynomial {
        degree: u32,
    },
    /// Cosine similarity of count vectors.
    BagOfWords,
    /// Index kernel: 1 on the diagonal of the training set, 0 elsewhere.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    #[serde(default)]
    pub trace_normalize: bool,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, trace_normalize: bool) -> Result<Self, KernelError> {
        let spec = KernelSpec { kind, trace_normalize };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear() -> Self {
        KernelSpec {
            kind: KernelKind::Linear,
            trace_normalize: false,
        }
    }

    pub fn gaussian(sigma: f64) -> Result<Self, KernelError> {
        Self::new(KernelKind::Gaussian { sigma }, false)
    }

    pub fn polynomial(degree: u32) -> Result<Self, KernelError> {
        Self::new(KernelKind::Polynomial { degree }, false)
    }

    pub fn bag_of_words() -> Self {
        KernelSpec {
            kind: KernelKind::BagOfWords,
            trace_normalize: false,
        }
    }

    pub fn identity() -> Self {
        KernelSpec {
            kind: KernelKind::Identity,
            trace_normalize: false,
        }
    }

    pub fn normalized(mut self) -> Self {
        self.trace_normalize = true;
        self
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match self.kind {
            KernelKind::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                KernelError::InvalidParameter(format!("gaussian sigma must be > 0, got {sigma}")),
            ),
            KernelKind::Polynomial { degree } if degree < 1 => {
                Err(KernelError::InvalidParameter("polynomial degree must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Evaluates `k(x, y)` on raw feature vectors.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
    if x.len() != y.len() {
        return Err(KernelError::DimensionMismatch(x.len(), y.len()));
    }
    match spec.kind {
        KernelKind::Linear => Ok(dot(x, y)),
        KernelKind::Gaussian { sigma } => Ok((-squared_distance(x, y) / sigma).exp()),
        KernelKind::Polynomial { degree } => Ok((dot(x, y) + 1.0).powi(degree as i32)),
        KernelKind::BagOfWords => {
            let nx = dot(x, x).sqrt();
            let ny = dot(y, y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(KernelError::ZeroNorm);
            }
            Ok(dot(x, y) / (nx * ny))
        }
        KernelKind::Identity => Err(KernelError::IdentityOnRawVectors),
    }
}

/// Dense symmetric kernel matrix over `size` training samples.
///
/// `scale` is the factor already applied to the raw kernel values (1 unless
/// the matrix was trace-normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    size: usize,
    values: Vec<f64>,
    scale: f64,
}

impl GramMatrix {
    /// Builds a matrix from explicit rows, checking squareness and symmetry.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, KernelError> {
        let n = rows.len();
        if n == 0 {
            return Err(KernelError::Empty);
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(KernelError::NotSquare {
                    rows: n,
                    row: r,
                    len: row.len(),
                });
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &a) in row.iter().enumerate().skip(i + 1) {
                let b = rows[j][i];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(KernelError::NotSymmetric(i, j));
                }
            }
        }
        Ok(GramMatrix {
            size: n,
            values: rows.into_iter().flatten().collect(),
            scale: 1.0,
        })
    }

    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        GramMatrix {
            size,
            values,
            scale: 1.0,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    /// Rescales to unit trace. A zero-trace matrix is returned unchanged.
    pub fn trace_normalized(mut self) -> Self {
        let trace = self.trace();
        if trace > 0.0 {
            let factor = 1.0 / trace;
            self.values.iter_mut().for_each(|v| *v *= factor);
            self.scale *= factor;
        }
        self
    }

    /// Principal submatrix on `indices`, keeping the scale factor.
    pub fn submatrix(&self, indices: &[usize]) -> GramMatrix {
        let m = indices.len();
        let mut values = Vec::with_capacity(m * m);
        for &i in indices {
            let row = self.row(i);
            values.extend(indices.iter().map(|&j| row[j]));
        }
        GramMatrix {
            size: m,
            values,
            scale: self.scale,
        }
    }

    /// `sum_k weights[k] * kernels[k]`. All kernels must share a size.
    pub fn weighted_sum(kernels: &[GramMatrix], weights: &[f64]) -> Result<GramMatrix, KernelError> {
        let first = kernels.first().ok_or(KernelError::Empty)?;
        if kernels.len() != weights.len() {
            return Err(KernelError::DimensionMismatch(kernels.len(), weights.len()));
        }
        let mut out = GramMatrix {
            size: first.size,
            values: vec![0.0; first.values.len()],
            scale: 1.0,
        };
        out.assign_weighted_sum(kernels, weights)?;
        Ok(out)
    }

    /// In-place variant of [`GramMatrix::weighted_sum`] reusing this allocation.
    pub fn assign_weighted_sum(&mut self, kernels: &[GramMatrix], weights: &[f64]) -> Result<(), KernelError> {
        if kernels.len() != weights.len() {
            return Err(KernelError::DimensionMismatch(kernels.len(), weights.len()));
        }
        for k in kernels {
            if k.size != self.size {
                return Err(KernelError::DimensionMismatch(k.size, self.size));
            }
        }
        self.scale = 1.0;
        self.values.iter_mut().for_each(|v| *v = 0.0);
        for (k, &w) in kernels.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            self.values.iter_mut().zip(&k.values).for_each(|(acc, v)| *acc += w * v);
        }
        Ok(())
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size, self.size, &self.values)
    }
}

/// Pairwise kernel matrix over `samples`, trace-normalized when `spec` is normalized.
pub fn gram_matrix(spec: &KernelSpec, samples: &[Vec<f64>]) -> Result<GramMatrix, KernelError> {
    spec.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(KernelError::Empty);
    }
    let gram = if spec.kind == KernelKind::Identity {
        GramMatrix::identity(n)
    } else {
        let dim = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(KernelError::DimensionMismatch(dim, bad.len()));
        }
        // upper triangle per row, mirrored afterwards
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| eval_kernel(spec, &samples[i], &samples[j]))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let mut values = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                let j = i + off;
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        GramMatrix {
            size: n,
            values,
            scale: 1.0,
        }
    };
    Ok(if spec.trace_normalize {
        gram.trace_normalized()
    } else {
        gram
    })
}

/// Kernel values between a new point and every training sample, multiplied
/// by `scale` (the factor stored on the training [`GramMatrix`]).
///
/// The identity kernel contributes 0 against every training point.
pub fn kernel_row(spec: &KernelSpec, train: &[Vec<f64>], x: &[f64], scale: f64) -> Result<Vec<f64>, KernelError> {
    if spec.kind == KernelKind::Identity {
        return Ok(vec![0.0; train.len()]);
    }
    train
        .iter()
        .map(|t| eval_kernel(spec, t, x).map(|v| v * scale))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub passed: bool,
}

/// Checks Mercer's condition: smallest eigenvalue >= -tol * largest.
pub fn validate_psd(gram: &GramMatrix) -> PsdReport {
    let eig = SymmetricEigen::new(gram.to_dmatrix());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    PsdReport {
        min_eigenvalue: min,
        max_eigenvalue: max,
        passed: min >= -PSD_TOLERANCE * max.max(0.0),
    }
}

/// Same check on raw rows; rejects non-square or asymmetric input.
pub fn validate_psd_rows(rows: Vec<Vec<f64>>) -> Result<PsdReport, KernelError> {
    GramMatrix::from_rows(rows).map(|g| validate_psd(&g))
}

/// Median of pairwise squared distances; 1 when every distance is 0.
pub fn median_squared_distance(samples: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            d.push(samples[i].iter().zip(&samples[j]).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_inner_product() {
        let v = eval_kernel(&KernelSpec::linear(), &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn gaussian_and_cosine_on_identical_inputs() {
        let x = [0.3, -1.2, 4.0];
        for sigma in [0.1, 1.0, 25.0] {
            let g = KernelSpec::gaussian(sigma).unwrap();
            assert_eq!(eval_kernel(&g, &x, &x).unwrap(), 1.0);
        }
        let b = eval_kernel(&KernelSpec::bag_of_words(), &x, &x).unwrap();
        assert_relative_eq!(b, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kernel_errors() {
        assert_eq!(
            eval_kernel(&KernelSpec::linear(), &[1.0], &[1.0, 2.0]),
            Err(KernelError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            eval_kernel(&KernelSpec::bag_of_words(), &[0.0, 0.0], &[1.0, 2.0]),
            Err(KernelError::ZeroNorm)
        );
        assert_eq!(
            eval_kernel(&KernelSpec::identity(), &[1.0], &[1.0]),
            Err(KernelError::IdentityOnRawVectors)
        );
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::polynomial(0).is_err());
    }

    #[test]
    fn polynomial_formula() {
        let k = KernelSpec::polynomial(3).unwrap();
        assert_eq!(eval_kernel(&k, &[1.0, 1.0], &[1.0, 0.0]).unwrap(), 8.0);
    }

    #[test]
    fn gram_examples() {
        let g = gram_matrix(&KernelSpec::linear(), &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(g.values(), &[1.0, 0.0, 0.0, 1.0]);

        let samples = vec![vec![5.0], vec![6.0], vec![7.0]];
        let id = gram_matrix(&KernelSpec::identity(), &samples).unwrap();
        assert_eq!(id, GramMatrix::identity(3));
        let idn = gram_matrix(&KernelSpec::identity().normalized(), &samples).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert_relative_eq!(idn.get(i, j), want, epsilon = 1e-15);
            }
        }
        assert_relative_eq!(idn.scale(), 1.0 / 3.0);

        let gg = gram_matrix(&KernelSpec::gaussian(1.0).unwrap(), &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(gg.get(0, 0), 1.0);
        assert_eq!(gg.get(1, 1), 1.0);
        assert_relative_eq!(gg.get(0, 1), (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(gg.get(0, 1), gg.get(1, 0));
    }

    #[test]
    fn gram_rejects_ragged_samples() {
        let err = gram_matrix(&KernelSpec::linear(), &[vec![1.0, 0.0], vec![0.0]]).unwrap_err();
        assert_eq!(err, KernelError::DimensionMismatch(2, 1));
        assert_eq!(gram_matrix(&KernelSpec::linear(), &[]), Err(KernelError::Empty));
    }

    #[test]
    fn psd_examples() {
        assert!(validate_psd(&GramMatrix::identity(4)).passed);
        let r = validate_psd_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(!r.passed);
        assert_relative_eq!(r.min_eigenvalue, -1.0, epsilon = 1e-12);
        assert_relative_eq!(r.max_eigenvalue, 3.0, epsilon = 1e-12);

        let v = [1.0, -2.0, 0.5];
        let outer = v.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        assert!(validate_psd_rows(outer).unwrap().passed);

        assert!(matches!(
            validate_psd_rows(vec![vec![1.0, 2.0], vec![3.0, 1.0]]),
            Err(KernelError::NotSymmetric(0, 1))
        ));
        assert!(matches!(
            validate_psd_rows(vec![vec![1.0, 2.0], vec![3.0]]),
            Err(KernelError::NotSquare { .. })
        ));
    }

    #[test]
    fn kernel_row_uses_training_scale() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let spec = KernelSpec::linear().normalized();
        let g = gram_matrix(&spec, &train).unwrap();
        assert_relative_eq!(g.trace(), 1.0, epsilon = 1e-12);
        let row = kernel_row(&spec, &train, &train[1], g.scale()).unwrap();
        assert_relative_eq!(row[1], g.get(1, 1), epsilon = 1e-15);
        assert_eq!(
            kernel_row(&KernelSpec::identity(), &train, &[3.0, 3.0], 1.0).unwrap(),
            vec![0.0, 0.0]
        );
    }

    fn spec_strategy() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            Just(KernelSpec::linear()),
            (0.1f64..10.0).prop_map(|s| KernelSpec::gaussian(s).unwrap()),
            (1u32..4).prop_map(|d| KernelSpec::polynomial(d).unwrap()),
            Just(KernelSpec::bag_of_words()),
            Just(KernelSpec::identity()),
        ]
    }

    proptest! {
        #[test]
        fn random_grams_are_symmetric_psd(
            spec in spec_strategy(),
            samples in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 2..12),
        ) {
            let g = gram_matrix(&spec, &samples).unwrap();
            for i in 0..g.size() {
                for j in 0..g.size() {
                    prop_assert_eq!(g.get(i, j), g.get(j, i));
                }
            }
            prop_assert!(validate_psd(&g).passed);
        }

        #[test]
        fn trace_normalization_rescales_uniformly(
            spec in spec_strategy(),
            samples in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..10),
        ) {
            prop_assume!(spec.kind != KernelKind::BagOfWords);
            let raw = gram_matrix(&spec, &samples).unwrap();
            prop_assume!(raw.trace() > 1e-9);
            let norm = raw.clone().trace_normalized();
            prop_assert!((norm.trace() - 1.0).abs() < 1e-10);
            let c = norm.scale();
            prop_assert!(c > 0.0);
            for (a, b) in raw.values().iter().zip(norm.values()) {
                prop_assert!((a * c - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            prop_assert!(validate_psd(&norm).passed);
        }

        #[test]
        fn bag_of_words_in_unit_interval(
            x in prop::collection::vec(0.0f64..5.0, 6),
            y in prop::collection::vec(0.0f64..5.0, 6),
        ) {
            prop_assume!(x.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v > 0.0));
            let v = eval_kernel(&KernelSpec::bag_of_words(), &x, &y).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }
}
