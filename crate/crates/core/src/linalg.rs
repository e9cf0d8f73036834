//! Dense kernels for tall-skinny least squares.
//!
//! The regressor matrix Phi is `N * n_y` rows by `n_theta_b` columns, where the
//! column count is tiny (two in the NFIR experiment) and the row count runs to
//! tens of thousands. Everything here is written for that shape: a thin
//! Householder QR, back-substitution, and the complement projector
//! `v - Q (Q^T v)` which never forms the `N x N` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Relative pivot tolerance on `|r_ii|` below which Phi is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major storage, rejecting bad lengths and non-finite data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        check_finite("Matrix::from_vec", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("Matrix::from_rows", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`, accumulated row by row.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::tr_matvec", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..self.cols {
                    g.data[a * self.cols + b] += ra * r[b];
                }
            }
        }
        for a in 0..self.cols {
            for b in 0..a {
                g.data[a * self.cols + b] = g.data[b * self.cols + a];
            }
        }
        g
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Sum without intermediate rounding (Shewchuk expansion); only the final result is rounded.
///
/// Values that cancel exactly, such as `x` and `-x`, contribute nothing regardless of order.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    partials.iter().rev().sum()
}

/// `a . b` with the products summed by [`exact_sum`].
pub fn exact_dot(a: &[f64], b: &[f64]) -> f64 {
    exact_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Thin QR factorization of a full-column-rank regressor matrix.
#[derive(Debug, Clone)]
pub struct RegressorFactorization {
    phi: Matrix,
    q_thin: Matrix,
    r_upper: Matrix,
    cond_estimate: f64,
}

impl RegressorFactorization {
    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn q_thin(&self) -> &Matrix {
        &self.q_thin
    }

    pub fn r_upper(&self) -> &Matrix {
        &self.r_upper
    }

    /// Ratio of the largest to smallest `|r_ii|`; a cheap lower bound on cond(Phi).
    pub fn cond_estimate(&self) -> f64 {
        self.cond_estimate
    }

    pub fn n_rows(&self) -> usize {
        self.phi.rows
    }

    pub fn n_cols(&self) -> usize {
        self.phi.cols
    }

    /// `argmin_theta ||Phi theta - b||_2`, via `R theta = Q^T b`.
    pub fn solve_least_squares(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("solve_least_squares", self.n_rows(), b.len())?;
        let qtb = self.q_thin.tr_matvec(b)?;
        Ok(self.back_substitute(&qtb))
    }

    /// `v - Q (Q^T v)`: the component of `v` orthogonal to the columns of Phi.
    pub fn apply_projector(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_projector", self.n_rows(), v.len())?;
        let coeffs = self.q_thin.tr_matvec(v)?;
        let mut out = v.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o -= dot(self.q_thin.row(i), &coeffs);
        }
        Ok(out)
    }

    /// Solves `R x = rhs`.
    pub fn back_substitute(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n_cols();
        let mut x = rhs.to_vec();
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.r_upper[(i, j)] * x[j];
            }
            x[i] = acc / self.r_upper[(i, i)];
        }
        x
    }

    /// Solves `R^T x = rhs`.
    pub fn forward_substitute_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n_cols();
        let mut x = rhs.to_vec();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.r_upper[(j, i)] * x[j];
            }
            x[i] = acc / self.r_upper[(i, i)];
        }
        x
    }
}

/// Householder thin QR of `phi`, normalized so that `diag(R) >= 0`.
pub fn factorize(phi: &Matrix) -> Result<RegressorFactorization> {
    check_finite("factorize", &phi.data)?;
    let (m, n) = (phi.rows, phi.cols);
    if n == 0 || m <= n {
        return Err(Error::InvalidSpec(format!(
            "factorize needs more rows than columns (got {m}x{n})"
        )));
    }

    let mut a = phi.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| a[(i, j)]).collect();
        let norm_x = norm2(&v);
        if norm_x == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let norm_v = norm2(&v);
        if norm_v == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm_v);
        apply_reflector(&mut a, &v, j, j);
        reflectors.push(v);
    }

    let mut r_upper = Matrix::zeros(n, n);
    for i in 0..n {
        for k in i..n {
            r_upper[(i, k)] = a[(i, k)];
        }
    }

    let mut q_thin = Matrix::zeros(m, n);
    for i in 0..n {
        q_thin[(i, i)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if !v.is_empty() {
            apply_reflector(&mut q_thin, v, j, 0);
        }
    }

    for i in 0..n {
        if r_upper[(i, i)] < 0.0 {
            for k in 0..n {
                r_upper[(i, k)] = -r_upper[(i, k)];
            }
            for row in 0..m {
                q_thin[(row, i)] = -q_thin[(row, i)];
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| r_upper[(i, i)].abs()).collect();
    let max_pivot = diag.iter().cloned().fold(0.0, f64::max);
    let min_pivot = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if let Some(column) = diag
        .iter()
        .position(|&d| max_pivot == 0.0 || d < RANK_TOLERANCE * max_pivot)
    {
        return Err(Error::RankDeficient {
            column,
            pivot: diag[column],
            max_pivot,
        });
    }

    Ok(RegressorFactorization {
        phi: phi.clone(),
        q_thin,
        r_upper,
        cond_estimate: max_pivot / min_pivot,
    })
}

// H = I - 2 v v^T acting on rows `offset..` of columns `col_start..`.
fn apply_reflector(a: &mut Matrix, v: &[f64], offset: usize, col_start: usize) {
    let cols = a.cols;
    let mut w = vec![0.0; cols - col_start];
    for (k, &vk) in v.iter().enumerate() {
        let row = &a.data[(offset + k) * cols + col_start..(offset + k + 1) * cols];
        for (wi, x) in w.iter_mut().zip(row) {
            *wi += vk * x;
        }
    }
    for (k, &vk) in v.iter().enumerate() {
        let row = &mut a.data[(offset + k) * cols + col_start..(offset + k + 1) * cols];
        for (x, wi) in row.iter_mut().zip(&w) {
            *x -= 2.0 * vk * wi;
        }
    }
}
