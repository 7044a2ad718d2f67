//! Small dense linear algebra for normal-equation systems.
//!
//! Designs in this crate have at most a few dozen regressors, so the
//! kernels here are straightforward row-major routines: a Cholesky
//! factorisation that reports which columns are collinear, SPD inversion,
//! and a cyclic Jacobi eigenvalue sweep for PSD checks.

use std::ops::{Index, IndexMut};

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Adds `w * a aᵀ` to a square matrix.
    pub fn add_outer(&mut self, a: &[T], w: T) {
        debug_assert_eq!(self.rows, a.len());
        debug_assert_eq!(self.cols, a.len());
        for i in 0..a.len() {
            let ai = a[i] * w;
            if ai == T::zero() {
                continue;
            }
            for j in 0..a.len() {
                self[(i, j)] += ai * a[j];
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Restricts a square matrix to the given row/column indices.
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let mut out = Self::zeros(keep.len(), keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: DenseMatrix<T>,
}

/// Factorises `a`, returning the indices of columns whose pivot collapses
/// relative to their own diagonal (i.e. columns in the span of earlier ones).
pub fn cholesky<T: Scalar>(a: &DenseMatrix<T>) -> std::result::Result<Cholesky<T>, Vec<usize>> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "cholesky needs a square matrix");
    let tol = T::rank_tolerance();
    let mut lower = DenseMatrix::zeros(n, n);
    let mut collinear = Vec::new();
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= lower[(j, k)] * lower[(j, k)];
        }
        let scale = a[(j, j)].abs();
        if !(d > tol * scale) || scale == T::zero() {
            collinear.push(j);
            // leave the column zeroed so later pivots are still assessed
            continue;
        }
        let pivot = d.sqrt();
        lower[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = s / pivot;
        }
    }
    if collinear.is_empty() {
        Ok(Cholesky { lower })
    } else {
        Err(collinear)
    }
}

impl<T: Scalar> Cholesky<T> {
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lower.rows();
        let l = &self.lower;
        let mut z = vec![T::zero(); n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DenseMatrix<T> {
        let n = self.lower.rows();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // symmetrise round-off
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = (inv[(i, j)] + inv[(j, i)]) / T::of(2.0);
                inv[(i, j)] = avg;
                inv[(j, i)] = avg;
            }
        }
        inv
    }

    pub fn log_det(&self) -> T {
        self.lower
            .diagonal()
            .into_iter()
            .map(|d| d.ln())
            .sum::<T>()
            * T::of(2.0)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen<T: Scalar>(a: &DenseMatrix<T>) -> (Vec<T>, DenseMatrix<T>) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let scale: T = m.as_slice().iter().map(|&x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= T::epsilon() * T::epsilon() * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::of(2.0) * apq);
                let t = if theta == T::zero() {
                    T::one()
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let diag = m.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut vecs = DenseMatrix::zeros(n, n);
    for (c, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[(r, c)] = v[(r, src)];
        }
    }
    (order.iter().map(|&i| diag[i]).collect(), vecs)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: &DenseMatrix<T>) -> Vec<T> {
    symmetric_eigen(a).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = DenseMatrix::<f64>::from_row_major(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let chol = cholesky(&a).unwrap();
        let x = chol.solve(&[1.0, 2.0, 3.0]);
        let back = a.matvec(&x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
        let inv = chol.inverse();
        let id = a.matmul(&inv);
        assert!(id.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn cholesky_flags_collinear_column() {
        // third column = first + second
        let x = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 2.0], [2.0, 1.0, 3.0]];
        let mut xtx = DenseMatrix::<f64>::zeros(3, 3);
        for r in &x {
            xtx.add_outer(r, 1.0);
        }
        assert_eq!(cholesky(&xtx).unwrap_err(), vec![2]);
    }

    #[test]
    fn zero_column_is_collinear() {
        let a = DenseMatrix::from_row_major(2, 2, vec![1.0f32, 0.0, 0.0, 0.0]);
        assert_eq!(cholesky(&a).unwrap_err(), vec![1]);
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let a = DenseMatrix::<f64>::from_row_major(2, 2, vec![2.0, 1.0, 1.0, 2.0]);
        let eig = symmetric_eigenvalues(&a);
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvectors_reconstruct_matrix() {
        let a = DenseMatrix::<f64>::from_row_major(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let (vals, vecs) = symmetric_eigen(&a);
        let mut back = DenseMatrix::zeros(3, 3);
        for (c, &l) in vals.iter().enumerate() {
            let col: Vec<f64> = (0..3).map(|r| vecs[(r, c)]).collect();
            back.add_outer(&col, l);
        }
        assert!(back.max_abs_diff(&a) < 1e-12);
    }
}
