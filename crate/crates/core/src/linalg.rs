//! Dense `f64` vectors and row-major matrices, plus the norm and symmetric
//! eigenvalue routines the rest of the crate relies on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::GaussianRng;

/// Default relative off-diagonal tolerance for the Jacobi eigensolver.
pub const EIG_TOL: f64 = 1e-14;

/// Relative asymmetry accepted by the eigensolvers.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            data: vec![1.0; len],
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// Unrolled dot product. The summation order is fixed, so results are
/// reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    math::sqrt(dot(x, x))
}

pub fn vector_inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(math::abs(*v)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Checked constructor: length must be `rows * cols` and entries finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { what: "matrix" });
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    left: (1, c),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `A v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = Vector::zeros(self.rows);
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    /// Unchecked `out = A v` for hot loops.
    #[inline]
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    /// `Aᵀ v`
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "matvec_t",
                left: (self.cols, self.rows),
                right: (v.len(), 1),
            });
        }
        let mut out = Vector::zeros(self.cols);
        self.matvec_t_acc(1.0, v, &mut out);
        Ok(out)
    }

    /// Unchecked `out += alpha Aᵀ v`.
    #[inline]
    pub fn matvec_t_acc(&self, alpha: f64, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, vi) in v.iter().enumerate() {
            if *vi != 0.0 {
                axpy(alpha * vi, self.row(i), out);
            }
        }
    }

    /// `A += alpha u vᵀ`
    #[inline]
    pub fn rank1_update(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let c = alpha * ui;
            if c != 0.0 {
                axpy(c, v, self.row_mut(i));
            }
        }
    }

    /// `outs[s] = A vs[s]` for every `s`, reading `A` once. Each output is
    /// bit-identical to [`Matrix::matvec_into`].
    pub fn matvec_batch_into(&self, vs: &[Vector], outs: &mut [Vector]) {
        debug_assert_eq!(vs.len(), outs.len());
        for i in 0..self.rows {
            let row = self.row(i);
            for (v, o) in vs.iter().zip(outs.iter_mut()) {
                o[i] = dot(row, v);
            }
        }
    }

    /// `outs[s] += alpha Aᵀ vs[s]` for every `s`, reading `A` once; bit-identical
    /// to [`Matrix::matvec_t_acc`] per output.
    pub fn matvec_t_acc_batch(&self, alpha: f64, vs: &[Vector], outs: &mut [Vector]) {
        debug_assert_eq!(vs.len(), outs.len());
        for i in 0..self.rows {
            let row = self.row(i);
            for (v, o) in vs.iter().zip(outs.iter_mut()) {
                if v[i] != 0.0 {
                    axpy(alpha * v[i], row, o);
                }
            }
        }
    }

    /// `A += Σ_s alphas[s] us[s] vs[s]ᵀ`, samples applied in order to each
    /// entry; bit-identical to successive [`Matrix::rank1_update`] calls.
    pub fn rank1_update_batch(&mut self, alphas: &[f64], us: &[&[f64]], vs: &[&[f64]]) {
        debug_assert!(alphas.len() == us.len() && us.len() == vs.len());
        for i in 0..self.rows {
            let row = self.row_mut(i);
            for ((a, u), v) in alphas.iter().zip(us).zip(vs) {
                let c = a * u[i];
                if c != 0.0 {
                    axpy(c, v, row);
                }
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    /// `self += alpha other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "Matrix::axpy shape mismatch");
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        vector_inf_norm(&self.data)
    }

    /// Largest absolute deviation from symmetry. Zero for non-square input is
    /// not meaningful, so non-square matrices report infinity.
    pub fn max_asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max(math::abs(self.get(i, j) - self.get(j, i)));
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "symmetrized needs a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    /// Largest row Euclidean norm, i.e. `sup_{‖x‖₂=1} ‖A x‖_∞`.
    pub fn two_to_infinity_norm(&self) -> f64 {
        (0..self.rows).fold(0.0, |m, i| m.max(norm2(self.row(i))))
    }

    /// `‖A‖_{2→2}` by power iteration on `AᵀA` from the normalized all-ones
    /// vector. `tol` is the relative change of the Rayleigh quotient at which
    /// the iteration stops.
    pub fn spectral_norm(&self, tol: f64, max_iter: usize) -> Result<f64> {
        if !self.is_finite() {
            return Err(Error::NonFinite {
                what: "spectral_norm input",
            });
        }
        if self.rows == 0 || self.cols == 0 || self.frobenius_norm() == 0.0 {
            return Ok(0.0);
        }
        let n = self.cols;
        let start = vec![1.0 / math::sqrt(n as f64); n];
        match self.power_iterate(start, tol, max_iter)? {
            Some(v) => Ok(v),
            None => {
                // all-ones start was annihilated; retry once from a fixed
                // non-symmetric perturbation of it
                let mut v: Vec<f64> = (0..n)
                    .map(|i| 1.0 + 0.5 * ((i % 7) as f64 - 3.0) / 3.0 + 1e-3 * i as f64)
                    .collect();
                let nv = norm2(&v);
                v.iter_mut().for_each(|x| *x /= nv);
                Ok(self.power_iterate(v, tol, max_iter)?.unwrap_or(0.0))
            }
        }
    }

    fn power_iterate(&self, mut v: Vec<f64>, tol: f64, max_iter: usize) -> Result<Option<f64>> {
        let mut av = vec![0.0; self.rows];
        let mut w = vec![0.0; self.cols];
        let mut rho_prev = 0.0;
        let mut stalled_at_zero = true;
        let mut residual = f64::INFINITY;
        for it in 0..max_iter {
            self.matvec_into(&v, &mut av);
            let rho = dot(&av, &av);
            if rho == 0.0 {
                return Ok(if it == 0 { None } else { Some(0.0) });
            }
            stalled_at_zero = false;
            w.iter_mut().for_each(|x| *x = 0.0);
            self.matvec_t_acc(1.0, &av, &mut w);
            // ‖AᵀA v − ρ v‖ / ρ
            residual = {
                let mut s = 0.0;
                for (wi, vi) in w.iter().zip(&v) {
                    let d = wi - rho * vi;
                    s += d * d;
                }
                math::sqrt(s) / rho
            };
            if it > 0 && math::abs(rho - rho_prev) <= tol * rho {
                return Ok(Some(math::sqrt(rho)));
            }
            rho_prev = rho;
            let nw = norm2(&w);
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
        }
        if stalled_at_zero {
            return Ok(None);
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
            estimate: math::sqrt(rho_prev),
            residual,
        })
    }

    fn check_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op: "symmetric eigenproblem",
                left: self.shape(),
                right: (self.cols, self.rows),
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFinite {
                what: "eigenproblem input",
            });
        }
        let asym = self.max_asymmetry();
        let scale = self.max_abs();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Asymmetric {
                max_asymmetry: asym,
            });
        }
        Ok(())
    }

    /// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi.
    pub fn sym_eig_min(&self, tol: f64) -> Result<f64> {
        self.check_symmetric()?;
        let (vals, _) = jacobi(self, tol, false)?;
        Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Full symmetric eigendecomposition: eigenvalues ascending, eigenvectors
    /// as the matching columns.
    pub fn sym_eig(&self, tol: f64) -> Result<(Vec<f64>, Matrix)> {
        self.check_symmetric()?;
        let (vals, vecs) = jacobi(self, tol, true)?;
        let vecs = vecs.expect("vectors requested");
        let n = vals.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let sorted_vals = order.iter().map(|&k| vals[k]).collect();
        let sorted_vecs = Matrix::from_fn(n, n, |i, j| vecs.get(i, order[j]));
        Ok((sorted_vals, sorted_vecs))
    }
}

/// Cyclic Jacobi rotations on the symmetrized input until the off-diagonal
/// Frobenius mass drops below `tol · ‖A‖_F`.
fn jacobi(input: &Matrix, tol: f64, want_vectors: bool) -> Result<(Vec<f64>, Option<Matrix>)> {
    let n = input.rows;
    let mut a = input.symmetrized();
    let mut v = if want_vectors {
        Some(Matrix::identity(n))
    } else {
        None
    };
    let fro = a.frobenius_norm();
    let off_norm = |a: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        math::sqrt(s)
    };
    const MAX_SWEEPS: usize = 100;
    let mut off = off_norm(&a);
    let mut sweep = 0;
    while off > tol * fro {
        if sweep == MAX_SWEEPS {
            return Err(Error::EigenNoConvergence { off_diagonal: off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if math::abs(theta) > 1e150 {
                    0.5 / theta
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (math::abs(theta) + math::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        off = off_norm(&a);
        sweep += 1;
    }
    Ok(((0..n).map(|i| a.get(i, i)).collect(), v))
}

/// Lower Cholesky factor of a 2×2 covariance. Slightly negative Schur
/// complements (≥ −1e-12 relative) are clamped to zero.
pub fn cholesky_2x2(a: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let scale = a[0][0].abs().max(a[1][1].abs()).max(1e-300);
    if math::abs(a[0][1] - a[1][0]) > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric {
            max_asymmetry: math::abs(a[0][1] - a[1][0]),
        });
    }
    if a[0][0] < -1e-12 * scale || a[1][1] < -1e-12 * scale {
        return Err(Error::NotPsd {
            detail: format!("negative diagonal in {:?}", a),
        });
    }
    let l00 = math::sqrt(a[0][0].max(0.0));
    let l10 = if l00 > 0.0 { a[1][0] / l00 } else { 0.0 };
    let schur = a[1][1] - l10 * l10;
    if schur < -1e-12 * scale {
        return Err(Error::NotPsd {
            detail: format!("Schur complement {schur} in {:?}", a),
        });
    }
    Ok([[l00, 0.0], [l10, math::sqrt(schur.max(0.0))]])
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut GaussianRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    rng.fill_normal(m.as_mut_slice());
    m
}

pub fn gaussian_vector(len: usize, rng: &mut GaussianRng) -> Vector {
    let mut v = Vector::zeros(len);
    rng.fill_normal(&mut v);
    v
}
