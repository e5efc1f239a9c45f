//! Dense row-major linear algebra in `f64`.
//!
//! Only what the rest of the crate needs: matrix products in the three
//! orientations used by backpropagation, a sign-normalized Householder QR,
//! power-iteration spectral norms and a stable logistic function.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal arithmetic whose inputs are already validated.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_raw(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.rows,
            ));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Matrix) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other.cols);
        if m * k * n >= GEMM_MIN_WORK {
            return gemm(m, k, n, (&self.data, k, 1), (&other.data, n, 1));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{} columns on the right", self.cols),
                other.cols,
            ));
        }
        Ok(self.matmul_t_unchecked(other))
    }

    pub(crate) fn matmul_t_unchecked(&self, other: &Matrix) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        if m * k * n >= GEMM_MIN_WORK {
            return gemm(m, k, n, (&self.data, k, 1), (&other.data, 1, k));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Matrix::from_raw(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{} rows on the right", self.rows),
                other.rows,
            ));
        }
        Ok(self.t_matmul_unchecked(other))
    }

    pub(crate) fn t_matmul_unchecked(&self, other: &Matrix) -> Matrix {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        if m * k * n >= GEMM_MIN_WORK {
            return gemm(m, k, n, (&self.data, 1, m), (&other.data, n, 1));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..k {
            let a_row = &self.data[r * m..(r + 1) * m];
            let b_row = &other.data[r * n..(r + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(m, n, out)
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        Ok(Vector(
            (0..self.rows).map(|r| dot(self.row(r), v.as_slice())).collect(),
        ))
    }

    fn zip_with(&self, other: &Matrix, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |r, c| self[(r, start + c)])
    }

    /// Rows `[start, start + count)` as a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        Matrix::from_raw(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        )
    }

    /// Mean of each column, as a vector of length `cols`.
    pub fn column_means(&self) -> Vector {
        let mut acc = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        let n = self.rows.max(1) as f64;
        Vector(acc.into_iter().map(|v| v / n).collect())
    }

    /// ‖selfᵀself − I‖_F; zero for matrices with orthonormal columns.
    pub fn orthogonality_defect(&self) -> f64 {
        let gram = self.t_matmul_unchecked(self);
        gram.sub(&Matrix::identity(self.cols))
            .expect("gram is square")
            .frobenius_norm()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dense real vector, e.g. a latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn gaussian<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Self {
        Self((0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape("Vector::sub", self.len(), other.len()));
        }
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape("Vector::add", self.len(), other.len()));
        }
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    /// As a 1×n matrix.
    pub fn to_row(&self) -> Matrix {
        Matrix::from_raw(1, self.len(), self.0.clone())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Products at least this large (in multiply-adds) go to the blocked kernel.
const GEMM_MIN_WORK: usize = 4096;

/// `A · B` for strided operands given as `(data, row_stride, col_stride)`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize)) -> Matrix {
    let mut out: Vec<f64> = Vec::with_capacity(m * n);
    assert!(a.0.len() >= m * k && b.0.len() >= k * n, "gemm operand too short");
    // SAFETY: the operands hold m×k and k×n elements under the given strides
    // (checked above for the dense layouts used here). `out` has room for m×n
    // values; with beta = 0 dgemm never reads C and writes every element, so
    // the length can be set afterwards.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    Matrix::from_raw(m, n, out)
}

/// Inner product with four interleaved partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Q and R factors of a square matrix.
#[derive(Clone, Debug)]
pub struct Qr {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR of a square matrix.
///
/// The factors are normalized so that `R` has a nonnegative diagonal, which
/// makes `Q` a deterministic (and, for full-rank input, smooth) function of `M`.
pub fn householder_qr(m: &Matrix) -> Result<Qr> {
    if !m.is_square() {
        return Err(Error::shape(
            "householder_qr",
            "square matrix",
            format!("{}x{}", m.rows, m.cols),
        ));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("householder_qr input".into()));
    }
    let n = m.rows;
    let mut r = m.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0; n];

    for k in 0..n.saturating_sub(1) {
        let len = n - k;
        let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] >= 0.0 { -norm } else { norm };
        for i in 0..len {
            v[i] = r[(k + i, k)];
        }
        v[0] -= alpha;
        let vv = dot(&v[..len], &v[..len]);
        if vv == 0.0 {
            continue;
        }
        let beta = 2.0 / vv;

        // R <- H R on the trailing block
        for j in k..n {
            let s: f64 = (0..len).map(|i| v[i] * r[(k + i, j)]).sum();
            let f = beta * s;
            for i in 0..len {
                r[(k + i, j)] -= f * v[i];
            }
        }
        r[(k, k)] = alpha;
        for i in k + 1..n {
            r[(i, k)] = 0.0;
        }

        // Q <- Q H
        for row in 0..n {
            let q_row = &mut q.data[row * n + k..row * n + n];
            let s = dot(q_row, &v[..len]);
            let f = beta * s;
            for (qv, vi) in q_row.iter_mut().zip(&v[..len]) {
                *qv -= f * vi;
            }
        }
    }

    for i in 0..n {
        if r[(i, i)] < 0.0 {
            for j in i..n {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..n {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok(Qr { q, r })
}

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
const POWER_SEEDS: [u64; 2] = [0x5eed_0001, 0x5eed_0002];
/// The iteration runs on `(MᵀM)^(2^GRAM_SQUARINGS)`.
const GRAM_SQUARINGS: usize = 20;

/// Largest singular value, by power iteration.
///
/// The iteration matrix is a normalized power of the Gram matrix `MᵀM` (or
/// `MMᵀ` when that is smaller), which shares its eigenvectors but separates
/// clustered top eigenvalues much faster. Convergence is judged on the
/// Rayleigh quotient of the Gram matrix itself. Uses a fixed seeded start
/// vector and restarts once with a second seed before reporting
/// non-convergence.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFinite("spectral_norm input".into()));
    }
    if m.cols == 0 || m.rows == 0 || m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let gram = if m.rows < m.cols {
        m.matmul_t_unchecked(m)
    } else {
        m.t_matmul_unchecked(m)
    };
    let mut accel = gram.clone();
    for _ in 0..GRAM_SQUARINGS {
        let scale = accel.max_abs();
        if scale == 0.0 {
            break;
        }
        let a = accel.scale(1.0 / scale);
        accel = a.matmul_unchecked(&a);
    }
    let mut last = Error::NonConvergence {
        iterations: POWER_MAX_ITERS,
        last_change: f64::NAN,
    };
    for seed in POWER_SEEDS {
        match power_iteration(&gram, &accel, seed) {
            Ok(value) => return Ok(value),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn power_iteration(gram: &Matrix, accel: &Matrix, seed: u64) -> Result<f64> {
    let n = gram.rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);

    let mut prev = f64::NAN;
    let mut change = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let w: Vec<f64> = (0..n).map(|r| dot(accel.row(r), &v)).collect();
        let w_norm = dot(&w, &w).sqrt();
        if w_norm == 0.0 || !w_norm.is_finite() {
            // start vector in the null space; let the caller retry with another seed
            return Err(Error::NonConvergence {
                iterations: 0,
                last_change: f64::NAN,
            });
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / w_norm;
        }
        // Rayleigh quotient of the unit vector v on the Gram matrix
        let gv: Vec<f64> = (0..n).map(|r| dot(gram.row(r), &v)).collect();
        let lambda = dot(&v, &gv);
        if prev.is_finite() {
            change = (lambda - prev).abs() / lambda.abs().max(f64::MIN_POSITIVE);
            if change <= POWER_TOLERANCE {
                return Ok(lambda.max(0.0).sqrt());
            }
        }
        prev = lambda;
    }
    Err(Error::NonConvergence {
        iterations: POWER_MAX_ITERS,
        last_change: change,
    })
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Logistic function evaluated without overflow for any finite input.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(n: usize, seed: u64) -> Matrix {
        Matrix::gaussian(n, n, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn new_rejects_nan_and_bad_length() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn qr_of_identity_is_identity() {
        let qr = householder_qr(&Matrix::identity(4)).unwrap();
        assert_eq!(qr.q, Matrix::identity(4));
        assert_eq!(qr.r, Matrix::identity(4));
    }

    #[test]
    fn qr_of_orthogonal_matrix_returns_it() {
        let q0 = householder_qr(&seeded(6, 3)).unwrap().q;
        let qr = householder_qr(&q0).unwrap();
        assert!(qr.q.sub(&q0).unwrap().max_abs() < 1e-12);
        assert!(qr.r.sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn qr_random_8x8_gram_is_identity() {
        let qr = householder_qr(&seeded(8, 11)).unwrap();
        assert!(qr.q.orthogonality_defect() <= 1e-12);
        for i in 0..8 {
            assert!(qr.r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(qr.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rejects_non_square_and_non_finite() {
        assert!(householder_qr(&Matrix::zeros(2, 3)).is_err());
        let mut m = Matrix::identity(2);
        m.as_mut_slice()[1] = f64::INFINITY;
        assert!(householder_qr(&m).is_err());
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Matrix::diag(&[3.0, 1.0])).unwrap() - 3.0).abs() < 1e-9);
        assert!((spectral_norm(&Matrix::identity(5)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_clustered_top_values() {
        let q = householder_qr(&Matrix::from_fn(12, 12, |r, c| ((r * 7 + c * 3) % 11) as f64 - 4.8 + f64::from(u8::from(r == c))))
            .unwrap()
            .q;
        for gap in [1e-3, 1e-5, 1e-7, 1e-9, 0.0] {
            let mut s = vec![0.5; 12];
            s[3] = 0.9;
            s[8] = 0.9 * (1.0 - gap);
            s[10] = 0.9 * (1.0 - 2.0 * gap);
            let m = q.matmul(&Matrix::diag(&s)).unwrap().matmul_t(&q).unwrap();
            let got = spectral_norm(&m).unwrap();
            // within the cluster width, never above the true value
            assert!(got <= 0.9 + 1e-12 && 0.9 - got <= 0.9 * 2.0 * gap + 1e-12, "gap {gap}: {got}");
        }
    }

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        let tiny = stable_sigmoid(-700.0);
        assert!(tiny > 0.0 && tiny < 1e-300);
        assert!((stable_sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert_eq!(stable_sigmoid(700.0), 1.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        for i in -100..=100 {
            let x = i as f64 * 0.37;
            assert!((stable_sigmoid(-x) - (1.0 - stable_sigmoid(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn products_agree_across_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let b = Matrix::gaussian(4, 5, 1.0, &mut rng);
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_t(&b.transpose()).unwrap();
        let ab3 = a.transpose().t_matmul(&b).unwrap();
        assert!(ab.sub(&ab2).unwrap().max_abs() < 1e-14);
        assert!(ab.sub(&ab3).unwrap().max_abs() < 1e-14);
        assert!(a.matmul(&a).is_err());
    }
}
