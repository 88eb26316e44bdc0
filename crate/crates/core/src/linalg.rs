//! Small dense linear algebra: row-major matrices, Cholesky, triangular
//! solves, LU, Householder least squares and a Jacobi symmetric eigensolver.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
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
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Symmetric matrix from an entry function evaluated on the lower triangle.
    pub fn symmetric_from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower Cholesky factor. Fails on the first non-positive pivot.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    cholesky_shifted(a, 0.0).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
}

fn cholesky_shifted(a: &Matrix, shift: f64) -> Option<Matrix> {
    assert!(a.is_square());
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let mut d = a[(j, j)] + shift - dot(lj, lj);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        d = d.sqrt();
        l.data[j * n + j] = d;
        for i in j + 1..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let lj = &head[j * n..j * n + j];
            let li = &tail[..j];
            let s = a[(i, j)] - dot(li, lj);
            tail[j] = s / d;
        }
    }
    Some(l)
}

/// Cholesky with deterministic diagonal jitter escalation.
///
/// Tries the plain factorization first, then adds `1e-10 * mean(diag)` and
/// multiplies the jitter by ten up to `1e-4 * mean(diag)`. Returns the
/// factor and the jitter that was added (zero when none was needed).
pub fn cholesky_jittered(a: &Matrix) -> Result<(Matrix, f64)> {
    if let Some(l) = cholesky_shifted(a, 0.0) {
        return Ok((l, 0.0));
    }
    let n = a.rows.max(1);
    let mean_diag = a.trace() / n as f64;
    let mut rel = 1e-10;
    while rel <= 1e-4 * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        if let Some(l) = cholesky_shifted(a, jitter) {
            return Ok((l, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: 1e-4 * mean_diag })
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in 0..n {
        let s = dot(&l.row(i)[..i], &x[..i]);
        x[i] = (x[i] - s) / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        x[i] /= l[(i, i)];
        let xi = x[i];
        let row = l.row(i);
        for k in 0..i {
            x[k] -= row[k] * xi;
        }
    }
    x
}

/// Lower-triangular matrix-vector product `L v`.
pub fn lower_mul_vec(l: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..l.rows).map(|i| dot(&l.row(i)[..=i], &v[..=i])).collect()
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

pub fn log_det_from_cholesky(l: &Matrix) -> f64 {
    2.0 * (0..l.rows).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Least squares `min ||X b - y||` by Householder QR.
///
/// Returns `None` when the design is numerically rank deficient.
pub fn least_squares(x: &Matrix, y: &[f64]) -> Option<Vec<f64>> {
    let (n, p) = (x.rows, x.cols);
    assert_eq!(y.len(), n);
    if n < p {
        return None;
    }
    // column-major working copy
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect();
    let mut rhs = y.to_vec();
    let col_scale = a.iter().map(|c| dot(c, c).sqrt()).fold(0.0, f64::max);
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * col_scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k + 1..p {
            let s = 2.0 * dot(&v, &a[j][k..]) / vnorm2;
            for (aij, vi) in a[j][k..].iter_mut().zip(&v) {
                *aij -= s * vi;
            }
        }
        let s = 2.0 * dot(&v, &rhs[k..]) / vnorm2;
        for (r, vi) in rhs[k..].iter_mut().zip(&v) {
            *r -= s * vi;
        }
    }
    let mut b = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = rhs[k];
        for j in k + 1..p {
            s -= a[j][k] * b[j];
        }
        b[k] = s / diag[k];
    }
    Some(b)
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Self> {
        assert!(a.is_square());
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs())).expect("non-empty");
            if lu[(p, k)].abs() <= 1e-13 * scale {
                return Err(Error::Singular(alloc::format!("zero pivot in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
                perm.swap(k, p);
            }
            for i in k + 1..n {
                let f = lu[(i, k)] / lu[(k, k)];
                lu[(i, k)] = f;
                for j in k + 1..n {
                    lu[(i, j)] -= f * lu[(k, j)];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[(i, j)] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[(i, j)] * x[j];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert!(a.is_square());
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= 1e-24 * m.as_slice().iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lu_solves_indefinite_system() {
        let a = Matrix::from_row_major(3, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let x = Lu::new(&a).unwrap().solve(&[2.0, 2.0, 2.0]);
        for v in x {
            assert_relative_eq!(v, 1.0, max_relative = 1e-15);
        }
        let singular = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(Lu::new(&singular).is_err());
    }

    #[test]
    fn hand_cholesky_two_by_two() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 0.5, 0.5, 1.0]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l[(0, 0)], 1.0);
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(l[(1, 0)], 0.5);
        assert_relative_eq!(l[(1, 1)], 0.75f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        // rank one
        let a = Matrix::from_row_major(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky(&a).is_err());
        let (_, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
    }

    #[test]
    fn indefinite_matrix_fails_after_max_jitter() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_jittered(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn triangular_solves_invert_products() {
        let a = Matrix::from_row_major(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = cholesky_solve(&l, &b);
        let back = a.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
        let y = solve_lower(&l, &b);
        let back = lower_mul_vec(&l, &y);
        for (u, v) in back.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn least_squares_recovers_exact_line() {
        let x = Matrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        let b = least_squares(&x, &y).unwrap();
        assert_relative_eq!(b[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn least_squares_flags_collinear_columns() {
        let x = Matrix::from_fn(10, 2, |i, _| i as f64);
        assert!(least_squares(&x, &[0.0; 10]).is_none());
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let a = Matrix::from_row_major(3, 3, vec![2.0, -1.0, 0.3, -1.0, 2.0, -1.0, 0.3, -1.0, 2.0]);
        let ev = symmetric_eigenvalues(&a);
        let na = nalgebra::DMatrix::from_row_slice(3, 3, a.as_slice());
        let mut reference: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| a.total_cmp(b));
        for (u, v) in ev.iter().zip(&reference) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
    }
}
