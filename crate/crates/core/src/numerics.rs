//! Dense symmetric-matrix primitives.
//!
//! Everything here is deterministic and dependency-free: cyclic Jacobi
//! rotations for eigendecompositions, Cholesky for log-determinants, and a
//! damped Newton iteration for the backward matrix quadratic. Intended for
//! desk-scale dimensions (up to ~32).

use crate::error::{Error, Result};
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

/// Pivot tolerance below which a Cholesky factorization is rejected.
const CHOLESKY_PIVOT_TOL: f64 = 1e-12;

/// Frobenius-norm target for the matrix-quadratic Newton iteration.
const QUADRATIC_RESIDUAL_TOL: f64 = 1e-12;

/// Iteration cap for the matrix-quadratic Newton iteration.
const QUADRATIC_MAX_ITER: usize = 200;

// ---------------------------------------------------------------------------
// General dense matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows in matrix literal".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].to_vec())
            .collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += aik * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.data[i * self.cols + j] * x[j];
            }
            out[i] = acc;
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for i in 0..self.rows {
            seq.serialize_element(&self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        seq.end()
    }
}

// ---------------------------------------------------------------------------
// Symmetric matrix
// ---------------------------------------------------------------------------

/// Dense symmetric matrix; construction symmetrizes, so `m[(i,j)] == m[(j,i)]`
/// holds exactly afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Build from row-major entries of a `dim x dim` matrix, symmetrizing.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "expected {} entries for a {dim}x{dim} symmetric matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let mut m = SymMatrix { dim, data: entries };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Mat::from_rows(rows)?;
        Self::from_mat(&m)
    }

    pub fn from_mat(m: &Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        SymMatrix::new(m.rows(), m.data.clone())
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_mat(&Mat::identity(dim)).expect("identity is square")
    }

    pub fn diag(entries: &[f64]) -> Self {
        let dim = entries.len();
        let mut m = SymMatrix::zeros(dim);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * dim + i] = v;
        }
        m
    }

    /// Scaled identity `s * I`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self::diag(&vec![s; dim])
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_mat(&self) -> Mat {
        Mat {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.to_mat().to_nested()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    /// Trace of the diagonal block starting at `start` with side `len`.
    pub fn block_trace(&self, start: usize, len: usize) -> f64 {
        (start..start + len)
            .map(|i| self.data[i * self.dim + i])
            .sum()
    }

    /// Diagonal block starting at `start` with side `len`.
    pub fn block(&self, start: usize, len: usize) -> SymMatrix {
        let mut out = SymMatrix::zeros(len);
        for i in 0..len {
            for j in 0..len {
                out.data[i * len + j] = self.data[(start + i) * self.dim + (start + j)];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Congruence transform `a * self * a^T`, symmetrized.
    pub fn congruence(&self, a: &Mat) -> SymMatrix {
        let prod = a.matmul(&self.to_mat()).matmul(&a.transpose());
        SymMatrix::from_mat(&prod).expect("congruence output is square")
    }

    /// Eigendecomposition by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues in ascending order and the matching orthonormal
    /// eigenvectors as columns, so `self = V diag(w) V^T`.
    pub fn eigen(&self) -> (Vec<f64>, Mat) {
        let n = self.dim;
        if n == 0 {
            return (Vec::new(), Mat::zeros(0, 0));
        }
        let mut a = self.to_mat();
        let mut v = Mat::identity(n);
        let scale = self.frobenius_norm().max(f64::MIN_POSITIVE);

        for _sweep in 0..64 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            for p in 0..n - 1 {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;

                    // rows/cols p and q of A
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    // force exact symmetry of the annihilated pair
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;

                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).expect("finite eigenvalues"));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
        let mut vectors = Mat::zeros(n, n);
        for (new_col, &old_col) in order.iter().enumerate() {
            for k in 0..n {
                vectors[(k, new_col)] = v[(k, old_col)];
            }
        }
        (eigenvalues, vectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        self.eigen().0[0]
    }

    /// True iff the smallest eigenvalue is at least `-tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    /// Lower Cholesky factor. Fails with `NonPositiveDefinite` when a pivot
    /// drops to 1e-12 or below.
    pub fn cholesky(&self) -> Result<Mat> {
        let n = self.dim;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self.data[j * n + j];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= CHOLESKY_PIVOT_TOL {
                return Err(Error::NonPositiveDefinite {
                    context: "cholesky",
                    pivot: d,
                });
            }
            l[(j, j)] = d.sqrt();
            for i in (j + 1)..n {
                let mut s = self.data[i * n + j];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / l[(j, j)];
            }
        }
        Ok(l)
    }

    /// Natural logarithm of the determinant of a positive-definite matrix.
    pub fn logdet(&self) -> Result<f64> {
        let l = self.cholesky()?;
        let mut acc = 0.0;
        for i in 0..self.dim {
            acc += l[(i, i)].ln();
        }
        Ok(2.0 * acc)
    }

    /// Inverse of a positive-definite matrix via Cholesky.
    pub fn inverse_pd(&self) -> Result<SymMatrix> {
        let n = self.dim;
        let l = self.cholesky()?;
        // Solve L L^T X = I column by column.
        let mut inv = Mat::zeros(n, n);
        for col in 0..n {
            let mut y = vec![0.0; n];
            for i in 0..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l[(i, k)] * y[k];
                }
                y[i] = s / l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * y[k];
                }
                y[i] = s / l[(i, i)];
                inv[(i, col)] = y[i];
            }
        }
        SymMatrix::from_mat(&inv)
    }

    /// Moore-Penrose pseudoinverse via the symmetric eigendecomposition.
    /// Eigenvalues with magnitude at most `rank_tol * max|eigenvalue|` are
    /// treated as zero.
    pub fn pinv(&self, rank_tol: f64) -> SymMatrix {
        let (w, v) = self.eigen();
        let lambda_max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let cutoff = rank_tol * lambda_max;
        let n = self.dim;
        let mut out = Mat::zeros(n, n);
        for k in 0..n {
            if w[k].abs() <= cutoff {
                continue;
            }
            let inv = 1.0 / w[k];
            for i in 0..n {
                if v[(i, k)] == 0.0 {
                    continue;
                }
                let vik = inv * v[(i, k)];
                for j in 0..n {
                    out[(i, j)] += vik * v[(j, k)];
                }
            }
        }
        SymMatrix::from_mat(&out).expect("pinv output is square")
    }

    /// Factor `F` with `F F^T = self` for sampling, flooring negative
    /// eigenvalues at zero so semidefinite inputs are legal.
    pub fn sqrt_factor_floored(&self) -> Mat {
        let (w, v) = self.eigen();
        let n = self.dim;
        let mut f = Mat::zeros(n, n);
        for k in 0..n {
            let s = w[k].max(0.0).sqrt();
            for i in 0..n {
                f[(i, k)] = v[(i, k)] * s;
            }
        }
        f
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.dim))?;
        for i in 0..self.dim {
            seq.serialize_element(&self.data[i * self.dim..(i + 1) * self.dim])?;
        }
        seq.end()
    }
}

// ---------------------------------------------------------------------------
// Linear solves
// ---------------------------------------------------------------------------

/// Solve `A x = b` in place by LU with partial pivoting; `b` becomes `x`.
pub(crate) fn lu_solve(mut a: Mat, b: &mut [f64]) -> Result<()> {
    let n = a.rows();
    assert!(a.is_square() && b.len() == n);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut piv = k;
        let mut best = a[(k, k)].abs();
        for i in (k + 1)..n {
            let v = a[(i, k)].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best <= 1e-300 {
            return Err(Error::NonPositiveDefinite {
                context: "lu pivot",
                pivot: best,
            });
        }
        if piv != k {
            for j in 0..n {
                let tmp = a[(k, j)];
                a[(k, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
            }
            perm.swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = a[(i, k)] / a[(k, k)];
            a[(i, k)] = f;
            for j in (k + 1)..n {
                let akj = a[(k, j)];
                a[(i, j)] -= f * akj;
            }
        }
    }
    let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for k in 0..i {
            let f = a[(i, k)];
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let f = a[(i, k)];
            x[i] -= f * x[k];
        }
        x[i] /= a[(i, i)];
    }
    b.copy_from_slice(&x);
    Ok(())
}

// ---------------------------------------------------------------------------
// Backward matrix quadratic
// ---------------------------------------------------------------------------

/// Solve `S + S Qbar S = C` for the positive-semidefinite `S`.
///
/// Damped Newton on the residual `R(S) = S + S Qbar S - C`, started at
/// `S = C` (exact when `Qbar = 0`) with symmetrization after every step.
pub fn solve_matrix_quadratic(c: &SymMatrix, qbar: &SymMatrix) -> Result<SymMatrix> {
    let n = c.dim();
    if qbar.dim() != n {
        return Err(Error::Dimension(format!(
            "quadratic solve: C is {n}x{n} but Qbar is {}x{}",
            qbar.dim(),
            qbar.dim()
        )));
    }

    let residual = |s: &SymMatrix| -> SymMatrix {
        let sm = s.to_mat();
        let sqs = sm.matmul(&qbar.to_mat()).matmul(&sm);
        SymMatrix::from_mat(&sm.add(&sqs).sub(&c.to_mat())).expect("square")
    };

    let mut sigma = c.clone();
    let mut res = residual(&sigma);
    let mut res_norm = res.frobenius_norm();

    for iteration in 0..QUADRATIC_MAX_ITER {
        if res_norm <= QUADRATIC_RESIDUAL_TOL {
            let min_eig = sigma.min_eigenvalue();
            if min_eig < -1e-10 {
                return Err(Error::NotPsd {
                    what: "matrix quadratic solution",
                    min_eigenvalue: min_eig,
                });
            }
            return Ok(sigma);
        }

        // Newton step: E + E Qbar S + S Qbar E = -R, solved in vectorized
        // form with M = I (x) (I + Qbar S)^T + (S Qbar) (x) I.
        let sm = sigma.to_mat();
        let qm = qbar.to_mat();
        let qs = qm.matmul(&sm); // Qbar S
        let sq = sm.matmul(&qm); // S Qbar
        let n2 = n * n;
        let mut big = Mat::zeros(n2, n2);
        for i in 0..n {
            for j in 0..n {
                let row = i * n + j;
                // E (I + Qbar S) term: coefficient over column (i, l)
                for l in 0..n {
                    let mut coeff = qs[(l, j)];
                    if l == j {
                        coeff += 1.0;
                    }
                    big[(row, i * n + l)] += coeff;
                }
                // (S Qbar) E term: coefficient over column (k, j)
                for k in 0..n {
                    big[(row, k * n + j)] += sq[(i, k)];
                }
            }
        }
        let mut rhs = vec![0.0; n2];
        for i in 0..n {
            for j in 0..n {
                rhs[i * n + j] = -res[(i, j)];
            }
        }
        lu_solve(big, &mut rhs).map_err(|_| Error::NoConvergence {
            what: "matrix quadratic Newton step",
            iterations: iteration,
            residual: res_norm,
        })?;

        // Damping: halve the step until the residual norm decreases.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = sigma.clone();
            for i in 0..n {
                for j in 0..n {
                    cand.data[i * n + j] += step * rhs[i * n + j];
                }
            }
            cand.symmetrize();
            let cand_res = residual(&cand);
            let cand_norm = cand_res.frobenius_norm();
            if cand_norm < res_norm {
                sigma = cand;
                res = cand_res;
                res_norm = cand_norm;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                what: "matrix quadratic damped Newton",
                iterations: iteration,
                residual: res_norm,
            });
        }
    }

    Err(Error::NoConvergence {
        what: "matrix quadratic damped Newton",
        iterations: QUADRATIC_MAX_ITER,
        residual: res_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Deterministic pseudo-random PD matrix: Q = R R^T + eps I.
    fn random_pd(dim: usize, seed: u64, eps: f64) -> SymMatrix {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let mut r = Mat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                r[(i, j)] = next();
            }
        }
        let q = r.matmul(&r.transpose());
        let mut s = SymMatrix::from_mat(&q).unwrap();
        for i in 0..dim {
            s.data[i * dim + i] += eps;
        }
        s
    }

    #[test]
    fn logdet_identity_is_zero() {
        assert_eq!(SymMatrix::identity(3).logdet().unwrap(), 0.0);
    }

    #[test]
    fn logdet_diagonal_is_product_log() {
        let m = SymMatrix::diag(&[2.0, 3.0]);
        assert!((m.logdet().unwrap() - 6.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logdet_two_by_two() {
        let m = sym(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((m.logdet().unwrap() - 3.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let m = SymMatrix::diag(&[1.0, -1.0]);
        assert!(matches!(
            m.logdet(),
            Err(Error::NonPositiveDefinite { .. })
        ));
    }

    #[test]
    fn logdet_matches_eigenvalue_sum_on_random_pd() {
        for seed in 0..20u64 {
            let dim = 2 + (seed % 5) as usize; // up to 6
            let m = random_pd(dim, seed, 0.5);
            let ld = m.logdet().unwrap();
            let sum: f64 = m.eigen().0.iter().map(|w| w.ln()).sum();
            assert!(
                (ld - sum).abs() <= 1e-10,
                "dim {dim} seed {seed}: {ld} vs {sum}"
            );
        }
    }

    #[test]
    fn pinv_identity() {
        let p = SymMatrix::identity(2).pinv(1e-10);
        assert!(p.sub(&SymMatrix::identity(2)).frobenius_norm() < 1e-14);
    }

    #[test]
    fn pinv_diagonal_acts_on_nonzeros() {
        let p = SymMatrix::diag(&[2.0, 0.0]).pinv(1e-10);
        assert!(p.sub(&SymMatrix::diag(&[0.5, 0.0])).frobenius_norm() < 1e-14);
    }

    #[test]
    fn pinv_zero_is_zero() {
        let p = SymMatrix::zeros(2).pinv(1e-10);
        assert_eq!(p.frobenius_norm(), 0.0);
    }

    #[test]
    fn pinv_involution_on_full_rank() {
        for seed in 0..10u64 {
            let m = random_pd(4, seed, 0.3);
            let back = m.pinv(1e-10).pinv(1e-10);
            assert!(
                back.sub(&m).frobenius_norm() <= 1e-9 * m.frobenius_norm().max(1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn is_psd_examples() {
        assert!(SymMatrix::identity(2).is_psd(1e-10));
        assert!(!SymMatrix::diag(&[1.0, -1.0]).is_psd(1e-10));
        assert!(SymMatrix::zeros(3).is_psd(1e-10));
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = random_pd(5, 7, 0.1);
        let (w, v) = m.eigen();
        let recon = SymMatrix::diag(&w).congruence(&v);
        assert!(recon.sub(&m).frobenius_norm() < 1e-11 * m.frobenius_norm().max(1.0));
        // eigenvalues sorted ascending
        for k in 1..w.len() {
            assert!(w[k] >= w[k - 1]);
        }
    }

    #[test]
    fn quadratic_degenerates_to_c_when_qbar_zero() {
        let c = sym(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let s = solve_matrix_quadratic(&c, &SymMatrix::zeros(2)).unwrap();
        assert!(s.sub(&c).frobenius_norm() < 1e-14);
    }

    #[test]
    fn quadratic_scalar_golden_root() {
        // s + s^2 = 1 has positive root (-1 + sqrt 5)/2
        let s = solve_matrix_quadratic(&SymMatrix::diag(&[1.0]), &SymMatrix::diag(&[1.0])).unwrap();
        let expected = (5.0f64.sqrt() - 1.0) / 2.0;
        assert!((s[(0, 0)] - expected).abs() < 1e-12);
        // back-substitution
        let back = s[(0, 0)] + s[(0, 0)] * s[(0, 0)];
        assert!((back - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_diagonal_entrywise_roots() {
        let q = [0.7, 2.5];
        let c = [1.3, 0.4];
        let s = solve_matrix_quadratic(&SymMatrix::diag(&c), &SymMatrix::diag(&q)).unwrap();
        for i in 0..2 {
            let expected = (-1.0 + (1.0 + 4.0 * q[i] * c[i]).sqrt()) / (2.0 * q[i]);
            assert!((s[(i, i)] - expected).abs() < 1e-12, "entry {i}");
        }
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    /// Independent closed form for the quadratic when Qbar is PD:
    /// with Y = Q^{1/2} S Q^{1/2}, the equation becomes Y^2 + Y = Q^{1/2} C Q^{1/2},
    /// so Y = (D + I/4)^{1/2} - I/2 via spectral calculus.
    fn quadratic_closed_form(c: &SymMatrix, qbar: &SymMatrix) -> SymMatrix {
        let (w, v) = qbar.eigen();
        let n = qbar.dim();
        let mut half = Mat::zeros(n, n);
        let mut half_inv = Mat::zeros(n, n);
        for k in 0..n {
            let s = w[k].max(0.0).sqrt();
            for i in 0..n {
                for j in 0..n {
                    half[(i, j)] += v[(i, k)] * s * v[(j, k)];
                    half_inv[(i, j)] += v[(i, k)] * (1.0 / s) * v[(j, k)];
                }
            }
        }
        let d = SymMatrix::from_mat(&half.matmul(&c.to_mat()).matmul(&half)).unwrap();
        let shifted = {
            let mut m = d.clone();
            for i in 0..n {
                m.data[i * n + i] += 0.25;
            }
            m
        };
        let (dw, dv) = shifted.eigen();
        let mut y = Mat::zeros(n, n);
        for k in 0..n {
            let val = dw[k].max(0.0).sqrt() - 0.5;
            for i in 0..n {
                for j in 0..n {
                    y[(i, j)] += dv[(i, k)] * val * dv[(j, k)];
                }
            }
        }
        SymMatrix::from_mat(&half_inv.matmul(&y).matmul(&half_inv)).unwrap()
    }

    #[test]
    fn quadratic_matches_spectral_closed_form() {
        for seed in 0..12u64 {
            let dim = 2 + (seed % 3) as usize;
            let c = random_pd(dim, seed * 3 + 1, 0.4);
            let q = random_pd(dim, seed * 5 + 2, 0.2);
            let newton = solve_matrix_quadratic(&c, &q).unwrap();
            let closed = quadratic_closed_form(&c, &q);
            assert!(
                newton.sub(&closed).frobenius_norm() < 1e-9,
                "seed {seed}: Newton and spectral routes disagree"
            );
        }
    }

    #[test]
    fn lu_solve_roundtrip() {
        let a = Mat::from_rows(&[
            vec![4.0, 1.0, 0.0],
            vec![-2.0, 6.0, 1.0],
            vec![0.5, 0.0, 3.0],
        ])
        .unwrap();
        let x_true = [1.0, -2.0, 0.5];
        let mut b = a.matvec(&x_true);
        lu_solve(a, &mut b).unwrap();
        for i in 0..3 {
            assert!((b[i] - x_true[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn prop_quadratic_residual_and_psd(seed in 0u64..200, dim in 1usize..5) {
            let c = random_pd(dim, seed.wrapping_add(11), 0.3);
            let q = random_pd(dim, seed.wrapping_add(37), 0.0); // PSD, may be near-singular
            let s = solve_matrix_quadratic(&c, &q).unwrap();
            let sm = s.to_mat();
            let resid = sm.add(&sm.matmul(&q.to_mat()).matmul(&sm)).sub(&c.to_mat());
            prop_assert!(resid.frobenius_norm() <= 1e-10);
            prop_assert!(s.is_psd(1e-10));
        }

        #[test]
        fn prop_symmetry_after_construction(seed in 0u64..200, dim in 1usize..6) {
            let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(3);
            let mut next = || {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            };
            let entries: Vec<f64> = (0..dim * dim).map(|_| next()).collect();
            let m = SymMatrix::new(dim, entries).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    prop_assert!((m[(i, j)] - m[(j, i)]).abs() <= 1e-12);
                }
            }
        }
    }
}
