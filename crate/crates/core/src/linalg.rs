//! Small dense linear algebra: Cholesky factors, Jacobi eigenvalues,
//! largest singular values and multivariate-normal densities/sampling.
//!
//! Matrices here are at most a few hundred rows, so everything is a plain
//! row-major `Vec<f64>` with no blocking.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_len, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from a row-major slice.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        check_len("Matrix::from_row_slice", rows * cols, data.len())?;
        Ok(Matrix {
            rows,
            cols,
            data: data.to_vec(),
        })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("Matrix::from_rows", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                m[(i, j)] = ui * vj;
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

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
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

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec", self.cols, v.len())?;
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(v, &mut out);
        Ok(out)
    }

    /// `out += self · v`, unchecked dimensions (hot loops only).
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), v);
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::add rows", self.rows, other.rows)?;
        check_len("Matrix::add cols", self.cols, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `self · m · selfᵀ`, symmetrised.
    pub fn congruence(&self, m: &Matrix) -> Result<Matrix> {
        let mut out = self.matmul(m)?.matmul(&self.transpose())?;
        out.symmetrize();
        Ok(out)
    }

    /// Replaces the matrix by `(M + Mᵀ)/2`. No-op on non-square input.
    pub fn symmetrize(&mut self) {
        if !self.is_square() {
            return;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                // NaN fails this comparison too.
                if !(gap <= SYMMETRY_TOL) {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

// Serialised as a list of rows, which is how matrices appear in config files.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cholesky factor `L` of a symmetric positive definite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdFactor {
    dim: usize,
    lower: Matrix,
    log_det: f64,
    diagonal: bool,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower_factor(&self) -> &Matrix {
        &self.lower
    }

    /// log-determinant of the factored matrix (not of `L`).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn det(&self) -> f64 {
        self.log_det.exp()
    }

    /// Solves `L w = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        if self.diagonal {
            for i in 0..n {
                b[i] /= self.lower[(i, i)];
            }
            return;
        }
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ w = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * b[k];
            }
            b[i] = s / self.lower[(i, i)];
        }
    }

    /// Solves `(L Lᵀ) w = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("SpdFactor::solve", self.dim, b.len())?;
        let mut w = b.to_vec();
        self.solve_lower_in_place(&mut w);
        self.solve_upper_in_place(&mut w);
        Ok(w)
    }

    /// `‖L⁻¹ v‖²`, i.e. `vᵀ (L Lᵀ)⁻¹ v`.
    pub fn mahalanobis_sq(&self, v: &[f64]) -> Result<f64> {
        check_len("SpdFactor::mahalanobis_sq", self.dim, v.len())?;
        let mut w = v.to_vec();
        self.solve_lower_in_place(&mut w);
        Ok(dot(&w, &w))
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim;
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            self.solve_lower_in_place(&mut col);
            self.solve_upper_in_place(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize();
        inv
    }

    /// `out += L · eps` (used to colour standard-normal draws).
    pub(crate) fn mul_lower_acc(&self, eps: &[f64], out: &mut [f64]) {
        if self.diagonal {
            for i in 0..self.dim {
                out[i] += self.lower[(i, i)] * eps[i];
            }
            return;
        }
        for i in 0..self.dim {
            out[i] += dot(&self.lower.row(i)[..=i], &eps[..=i]);
        }
    }
}

/// Cholesky factorisation. Fails loudly on anything not numerically SPD; no
/// jitter is ever added.
pub fn chol_spd(matrix: &Matrix) -> Result<SpdFactor> {
    matrix.check_symmetric()?;
    let n = matrix.rows();
    let mut l = Matrix::zeros(n, n);
    let mut diagonal = true;
    for j in 0..n {
        let mut pivot = matrix[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotSpd { pivot: j, value: pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            let v = s / ljj;
            if v != 0.0 {
                diagonal = false;
            }
            l[(i, j)] = v;
        }
    }
    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(SpdFactor {
        dim: n,
        lower: l,
        log_det,
        diagonal,
    })
}

/// All eigenvalues of a symmetric matrix, in descending order, by cyclic
/// Jacobi rotations.
pub fn sym_eigvals(matrix: &Matrix) -> Result<Vec<f64>> {
    matrix.check_symmetric()?;
    let n = matrix.rows();
    let mut a = matrix.clone();
    a.symmetrize();
    let scale = a.frobenius_norm();
    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };
    let threshold = JACOBI_TOL * scale.max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= threshold {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::ConvergenceFailure { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
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
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

pub fn max_eigenvalue(matrix: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(matrix)?.first().copied().unwrap_or(0.0))
}

pub fn min_eigenvalue(matrix: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(matrix)?.last().copied().unwrap_or(0.0))
}

/// σ₁(M) from the smaller Gram matrix.
pub fn max_singular_value(matrix: &Matrix) -> Result<f64> {
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Ok(0.0);
    }
    let t = matrix.transpose();
    let mut gram = if matrix.rows() <= matrix.cols() {
        matrix.matmul(&t)?
    } else {
        t.matmul(matrix)?
    };
    gram.symmetrize();
    Ok(max_eigenvalue(&gram)?.max(0.0).sqrt())
}

/// log N(point; mean, L Lᵀ).
pub fn mvn_logpdf(point: &[f64], mean: &[f64], cov_factor: &SpdFactor) -> Result<f64> {
    let d = cov_factor.dim();
    check_len("mvn_logpdf point", d, point.len())?;
    check_len("mvn_logpdf mean", d, mean.len())?;
    let diff: Vec<f64> = point.iter().zip(mean).map(|(p, m)| p - m).collect();
    let q = cov_factor.mahalanobis_sq(&diff)?;
    Ok(-0.5 * (d as f64 * LN_2PI + cov_factor.log_det() + q))
}

/// Writes one draw of N(mean, L Lᵀ) into `out`.
pub(crate) fn mvn_sample_into<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &[f64],
    cov_factor: &SpdFactor,
    eps: &mut [f64],
    out: &mut [f64],
) {
    for e in eps.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    out.copy_from_slice(mean);
    cov_factor.mul_lower_acc(eps, out);
}

/// `count` draws `mean + L ε`, ε standard normal (ziggurat), deterministic in
/// the rng state.
pub fn mvn_sample<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &[f64],
    cov_factor: &SpdFactor,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = cov_factor.dim();
    check_len("mvn_sample mean", d, mean.len())?;
    if count == 0 {
        return Err(Error::InvalidSpec("mvn_sample count must be >= 1".into()));
    }
    let mut eps = vec![0.0; d];
    Ok((0..count)
        .map(|_| {
            let mut out = vec![0.0; d];
            mvn_sample_into(rng, mean, cov_factor, &mut eps, &mut out);
            out
        })
        .collect())
}
