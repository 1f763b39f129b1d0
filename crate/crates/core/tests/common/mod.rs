//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use newsmkl::kernels::{gram_matrix, GramMatrix, KernelSpec};
use newsmkl::svm::Labels;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Labels from a noisy nonlinear rule, with both classes present.
pub fn random_labels(rng: &mut ChaCha8Rng, xs: &[Vec<f64>]) -> Labels {
    let mut y: Vec<f64> = xs
        .iter()
        .map(|x| {
            let s = x[0] * x[1] + 0.5 * x[0] - 0.3 * x.last().unwrap() + 0.3 * rng.random_range(-1.0..1.0);
            if s > 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    if y.iter().all(|&v| v == y[0]) {
        y[0] = -y[0];
    }
    Labels::new(y).unwrap()
}

/// Trace-normalized linear, gaussian and polynomial Gram matrices.
pub fn kernel_family(xs: &[Vec<f64>]) -> Vec<GramMatrix> {
    [
        KernelSpec::linear(),
        KernelSpec::gaussian(1.0).unwrap(),
        KernelSpec::polynomial(2).unwrap(),
        KernelSpec::gaussian(0.2).unwrap(),
    ]
    .into_iter()
    .map(|s| gram_matrix(&s.normalized(), xs).unwrap())
    .collect()
}

pub fn dense(g: &GramMatrix) -> DMatrix<f64> {
    let n = g.size();
    DMatrix::from_fn(n, n, |i, j| g.get(i, j))
}

/// `sum a - 1/2 a' Q a` with `Q = diag(y) K diag(y)`.
pub fn dual_objective(k: &DMatrix<f64>, y: &[f64], a: &[f64]) -> f64 {
    let v = DVector::from_iterator(a.len(), a.iter().zip(y).map(|(a, y)| a * y));
    a.iter().sum::<f64>() - 0.5 * v.dot(&(k * &v))
}

/// Euclidean projection onto `{0 <= a <= c, y'a = 0}` by bisection on the multiplier.
pub fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(v, y)| (v - lam * y).clamp(0.0, c)).collect() };
    let h = |lam: f64| -> f64 { at(lam).iter().zip(y).map(|(a, y)| a * y).sum() };
    let span = v.iter().fold(c, |m, x| m.max(x.abs())) + c;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * span {
            break;
        }
    }
    at(0.5 * (lo + hi))
}

/// Maximizes the SVM dual by accelerated projected gradient with restarts,
/// then polishes by solving the KKT system on the free variables.
pub fn qp_oracle(k: &DMatrix<f64>, y: &[f64], c: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * k[(i, j)]);
    let lip = q.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;
    let grad = |a: &[f64]| -> Vec<f64> {
        let av = DVector::from_column_slice(a);
        let qa = &q * av;
        (0..n).map(|i| 1.0 - qa[i]).collect()
    };
    let obj = |a: &[f64]| dual_objective(k, y, a);
    let mut x = vec![0.0; n];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut best = obj(&x);
    for it in 0..200_000 {
        if it % 200 == 199 {
            if let Some(p) = polish(&q, y, c, &x) {
                if kkt_optimal(&q, y, c, &p) {
                    return (obj(&p), p);
                }
            }
        }
        let g = grad(&z);
        let moved: Vec<f64> = z.iter().zip(&g).map(|(z, g)| z + step * g).collect();
        let next = project(&moved, y, c);
        let f = obj(&next);
        if f < best {
            t = 1.0;
            z = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        z = next.iter().zip(&x).map(|(n, o)| n + beta * (n - o)).collect();
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        t = t_next;
        best = f;
        if delta < 1e-13 * c {
            break;
        }
    }
    match polish(&q, y, c, &x) {
        Some(p) if obj(&p) >= best => (obj(&p), p),
        _ => (best, x),
    }
}

/// Largest violation of the dual optimality conditions is below `1e-9`.
fn kkt_optimal(q: &DMatrix<f64>, y: &[f64], c: f64, a: &[f64]) -> bool {
    let av = DVector::from_column_slice(a);
    let qa = q * av;
    let (mut up, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..a.len() {
        // -y_i * d/da_i of (1/2 a'Qa - sum a)
        let v = -y[i] * (qa[i] - 1.0);
        let can_up = (y[i] > 0.0 && a[i] < c) || (y[i] < 0.0 && a[i] > 0.0);
        let can_low = (y[i] > 0.0 && a[i] > 0.0) || (y[i] < 0.0 && a[i] < c);
        if can_up {
            up = up.max(v);
        }
        if can_low {
            low = low.min(v);
        }
    }
    up - low <= 1e-9
}

/// Solves the equality-constrained QP on the variables strictly inside the box.
fn polish(q: &DMatrix<f64>, y: &[f64], c: f64, a: &[f64]) -> Option<Vec<f64>> {
    let tol = 1e-7 * c;
    let free: Vec<usize> = (0..a.len()).filter(|&i| a[i] > tol && a[i] < c - tol).collect();
    let upper: Vec<usize> = (0..a.len()).filter(|&i| a[i] >= c - tol).collect();
    let m = free.len();
    if m == 0 {
        return None;
    }
    // [Q_FF y_F; y_F' 0] [a_F; b] = [1 - Q_FU c; -y_U' c]
    let mut sys = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (r, &i) in free.iter().enumerate() {
        for (s, &j) in free.iter().enumerate() {
            sys[(r, s)] = q[(i, j)];
        }
        sys[(r, m)] = y[i];
        sys[(m, r)] = y[i];
        rhs[r] = 1.0 - upper.iter().map(|&j| q[(i, j)] * c).sum::<f64>();
    }
    rhs[m] = -upper.iter().map(|&j| y[j] * c).sum::<f64>();
    let sol = sys.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut out: Vec<f64> = a
        .iter()
        .map(|&v| {
            if v >= c - tol {
                c
            } else if v <= tol {
                0.0
            } else {
                v
            }
        })
        .collect();
    for (r, &i) in free.iter().enumerate() {
        if !(-1e-9..=c + 1e-9).contains(&sol[r]) {
            return None;
        }
        out[i] = sol[r].clamp(0.0, c);
    }
    let eq: f64 = out.iter().zip(y).map(|(a, y)| a * y).sum();
    (eq.abs() < 1e-9 * c.max(1.0)).then_some(out)
}

/// Every point of the simplex grid with spacing `1/steps`.
pub fn simplex_grid(n: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(n: usize, left: usize, steps: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if prefix.len() == n - 1 {
            let mut d: Vec<f64> = prefix.iter().map(|&k| k as f64 / steps as f64).collect();
            d.push(left as f64 / steps as f64);
            out.push(d);
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(n, left - k, steps, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, steps, steps, &mut Vec::new(), &mut out);
    out
}

/// Row relevance `a' H^{-1} a / s^2` with `H = A' diag(1/s^2) A` built densely.
pub fn dense_relevance(rows: &[Vec<f64>], rhs: &[f64], x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let slacks: Vec<f64> = rows
        .iter()
        .zip(rhs)
        .map(|(a, b)| b - a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>())
        .collect();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for (a, s) in rows.iter().zip(&slacks) {
        for i in 0..dim {
            for j in 0..dim {
                h[(i, j)] += a[i] * a[j] / (s * s);
            }
        }
    }
    let hinv = h.try_inverse().expect("barrier Hessian invertible");
    rows.iter()
        .zip(&slacks)
        .map(|(a, s)| {
            let av = DVector::from_column_slice(a);
            (av.transpose() * &hinv * &av)[(0, 0)] / (s * s)
        })
        .collect()
}

/// tf-idf by explicit loops: `tf = count / doc_length`, `idf = ln(N / df)`.
pub fn naive_tfidf(corpus: &[Vec<u32>], lengths: &[usize]) -> Vec<Vec<f64>> {
    let n_docs = corpus.len();
    let dim = corpus[0].len();
    let mut out = vec![vec![0.0; dim]; n_docs];
    for j in 0..dim {
        let mut df = 0usize;
        for doc in corpus {
            if doc[j] > 0 {
                df += 1;
            }
        }
        for d in 0..n_docs {
            if df == 0 || lengths[d] == 0 {
                continue;
            }
            let tf = corpus[d][j] as f64 / lengths[d] as f64;
            out[d][j] = tf * (n_docs as f64 / df as f64).ln();
        }
    }
    out
}

/// `(tp, tn, fp, fn)` by counting each case separately.
pub fn naive_confusion(pred: &[i8], label: &[i8]) -> (usize, usize, usize, usize) {
    let count = |p: i8, l: i8| pred.iter().zip(label).filter(|&(&a, &b)| a == p && b == l).count();
    (count(1, 1), count(-1, -1), count(1, -1), count(-1, 1))
}

/// Annualized Sharpe with the unbiased standard deviation.
pub fn naive_sharpe(r: &[f64], periods: f64) -> Option<f64> {
    let n = r.len() as f64;
    if r.len() < 2 {
        return None;
    }
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (var > 0.0).then(|| periods.sqrt() * mean / var.sqrt())
}

/// Smallest value with at least `p` percent of the sample at or below it.
pub fn naive_nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    for (i, v) in sorted.iter().enumerate() {
        if (i + 1) as f64 * 100.0 >= p * n as f64 {
            return *v;
        }
    }
    sorted[n - 1]
}
