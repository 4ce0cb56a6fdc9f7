//! Dense vector and matrix kernels.
//!
//! Vectors are plain `[f64]` slices; the helpers here are the handful of
//! BLAS-1 style operations the solvers need. [`SymMatrix`] is an exactly
//! symmetric dense matrix with a cyclic Jacobi eigensolver behind it.

use crate::error::{Error, Result};
use crate::problems::Objective;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Mean of equally sized blocks, summed in ascending block order.
///
/// When every block is bitwise identical the first block is returned as-is,
/// which makes averaging exactly idempotent.
pub fn mean_of_blocks<'a, I>(blocks: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
    I::IntoIter: Clone,
{
    let iter = blocks.into_iter();
    let mut probe = iter.clone();
    let first = probe.next().expect("at least one block");
    if probe.all(|b| b == first) {
        return first.to_vec();
    }
    let mut out = vec![0.0; first.len()];
    let mut n = 0usize;
    for b in iter {
        for (o, v) in out.iter_mut().zip(b) {
            *o += v;
        }
        n += 1;
    }
    let n = n as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn block_mean(blocks: &[Vec<f64>]) -> Vec<f64> {
    mean_of_blocks(blocks.iter().map(Vec::as_slice))
}

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::argument(format!(
            "{what}: dimension mismatch (expected {expected}, got {got})"
        )));
    }
    Ok(())
}

/// Bregman divergence `D_f(x, y) = f(x) - f(y) - <grad f(y), x - y>`.
pub fn bregman_divergence<F: Objective + ?Sized>(f: &F, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim("bregman_divergence x", f.dim(), x.len())?;
    check_dim("bregman_divergence y", f.dim(), y.len())?;
    let gy = f.gradient(y);
    let diff = sub(x, y);
    Ok(f.value(x) - f.value(y) - dot(&gy, &diff))
}

/// Dense row-major symmetric matrix. Symmetry is exact (`a[i][j] == a[j][i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::argument("matrix must have at least one row"));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::argument(format!("row {i} has length {}, expected {n}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(n, data)
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::argument(format!("expected {n}x{n} entries, got {}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::argument(format!("non-finite matrix entry {v}")));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if data[i * n + j] != data[j * n + i] {
                    return Err(Error::argument(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// Builds from an almost-symmetric buffer by averaging the two triangles.
    pub(crate) fn symmetrize(n: usize, mut data: Vec<f64>) -> Self {
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in diag.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self { n, data }
    }

    /// `V diag(values) V^T` where `vectors[k]` is the k-th column of V.
    pub fn from_spectrum(values: &[f64], vectors: &[Vec<f64>]) -> Self {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (lam, v) in values.iter().zip(vectors) {
            for i in 0..n {
                let s = lam * v[i];
                for j in 0..n {
                    data[i * n + j] += s * v[j];
                }
            }
        }
        Self::symmetrize(n, data)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// Entrywise linear combination `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &SymMatrix, beta: f64) -> SymMatrix {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        SymMatrix { n: self.n, data }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        inf_norm(&self.data)
    }
}

/// Eigenvalues (descending) and matching unit eigenvectors.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

const MAX_EIGEN_DIM: usize = 512;

/// Cyclic Jacobi eigendecomposition.
pub fn symmetric_eigen(m: &SymMatrix) -> Result<Eigen> {
    let n = m.dim();
    if n > MAX_EIGEN_DIM {
        return Err(Error::argument(format!(
            "eigensolve limited to dimension {MAX_EIGEN_DIM}, got {n}"
        )));
    }
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.max_abs().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| (0..n).map(|k| v[k * n + col]).collect())
        .collect();
    Ok(Eigen { values, vectors })
}

/// Eigenvalues in descending order.
pub fn symmetric_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(m)?.values)
}

/// Slack below zero still treated as a zero eigenvalue.
pub const PSD_SLACK: f64 = 1e-10;

/// Principal square root of a positive semidefinite matrix.
pub fn matrix_sqrt_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = symmetric_eigen(m)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -PSD_SLACK {
        return Err(Error::argument(format!(
            "matrix is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    let roots: Vec<f64> = eig.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(SymMatrix::from_spectrum(&roots, &eig.vectors))
}

/// Solves `m x = b` for symmetric positive definite `m` by Cholesky.
pub fn cholesky_solve(m: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = m.dim();
    check_dim("cholesky_solve", n, b.len())?;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::argument("matrix is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Largest eigenvalue of a PSD operator given as a matrix-vector product.
///
/// Stops when successive Rayleigh quotients agree to `rel_tol` or after
/// `max_iter` products.
pub fn power_iteration(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>, max_iter: usize, rel_tol: f64) -> f64 {
    // Fixed, non-degenerate start so results are reproducible.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = apply(&v);
        let next = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let done = (next - lambda).abs() <= rel_tol * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}
