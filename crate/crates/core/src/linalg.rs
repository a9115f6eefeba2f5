//! Small dense complex linear algebra.
//!
//! Everything here works on matrices with at most a few dozen rows, so the
//! routines favour clarity and exact structure (Hermitian symmetry, unit norm,
//! deterministic phase) over blocking or vectorisation.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Pivot tolerance for PSD checks, relative to the largest diagonal entry.
pub const EPS_PSD: f64 = 1e-10;
/// Smallest admissible ratio of extreme singular values for zero-forcing.
pub const EPS_RANK: f64 = 1e-9;

/// Dense complex matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<C64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("columns of unequal length".into()));
        }
        let m = Self::from_fn(rows, cols, |i, j| columns[j][i]);
        Self::new(rows, cols, m.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[C64]) {
        assert_eq!(v.len(), self.rows, "column length");
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn columns(&self) -> Vec<Vec<C64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "inner dimensions");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(l, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols, "vector length");
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * x[j]).sum())
            .collect()
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - rhs[(i, j)])
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + rhs[(i, j)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Hermitian matrix that is positive semidefinite up to round-off.
///
/// Every mutation writes an entry and its mirrored conjugate, and diagonal
/// entries are kept real, so `a[i][j] == conj(a[j][i])` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianPsd {
    dim: usize,
    data: Vec<C64>,
}

impl HermitianPsd {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim);
        for i in 0..dim {
            a.data[i * dim + i] = C64::new(1.0, 0.0);
        }
        a
    }

    /// Hermitian part `(A + A^H) / 2` of a square matrix.
    pub fn from_matrix(a: &ComplexMatrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Dimension("Hermitian matrix must be square".into()));
        }
        let dim = a.rows();
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            out.data[i * dim + i] = C64::new(a[(i, i)].re, 0.0);
            for j in (i + 1)..dim {
                let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
                out.data[i * dim + j] = v;
                out.data[j * dim + i] = v.conj();
            }
        }
        Ok(out)
    }

    /// Builds the matrix from its upper triangle; the diagonal's imaginary
    /// part is discarded.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            out.data[i * dim + i] = C64::new(f(i, i).re, 0.0);
            for j in (i + 1)..dim {
                let v = f(i, j);
                out.data[i * dim + j] = v;
                out.data[j * dim + i] = v.conj();
            }
        }
        out
    }

    /// `B B^H` for an arbitrary `B`.
    pub fn gram(b: &ComplexMatrix) -> Self {
        let mut out = Self::zeros(b.rows());
        for j in 0..b.cols() {
            out.add_outer(1.0, &b.column(j));
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.dim + j]
    }

    /// `self += weight * h h^H`.
    pub fn add_outer(&mut self, weight: f64, h: &[C64]) {
        assert_eq!(h.len(), self.dim, "outer product length");
        let n = self.dim;
        for i in 0..n {
            self.data[i * n + i].re += weight * h[i].norm_sqr();
            for j in (i + 1)..n {
                let v = h[i] * h[j].conj() * weight;
                self.data[i * n + j] += v;
                self.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, weight: f64, other: &Self) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * weight;
        }
    }

    pub fn scaled(&self, weight: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|z| z * weight).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i].re).sum()
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.data[i * self.dim + i].re)
            .fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..n).map(|j| self.data[i * n + j] * x[j]).sum())
            .collect()
    }

    /// Real quadratic form `x^H A x`.
    pub fn quad_form(&self, x: &[C64]) -> f64 {
        let ax = self.mul_vec(x);
        dot(x, &ax).re
    }

    pub fn to_matrix(&self) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim;
        // [[Re, -Im], [Im, Re]] has every eigenvalue of A twice.
        let mut lifted = vec![0.0; 4 * n * n];
        let m = 2 * n;
        for i in 0..n {
            for j in 0..n {
                let z = self.get(i, j);
                lifted[i * m + j] = z.re;
                lifted[(i + n) * m + (j + n)] = z.re;
                lifted[i * m + (j + n)] = -z.im;
                lifted[(i + n) * m + j] = z.im;
            }
        }
        let mut ev = symmetric_eigenvalues(&mut lifted, m);
        ev.sort_by(f64::total_cmp);
        ev.into_iter().step_by(2).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }
}

/// Cyclic Jacobi on a dense real symmetric matrix; returns unsorted eigenvalues.
fn symmetric_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let total: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
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
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Hermitian inner product `x^H y`.
pub fn dot(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

pub fn scale(x: &[C64], a: f64) -> Vec<C64> {
    x.iter().map(|z| z * a).collect()
}

pub fn unit_vector(n: usize, i: usize) -> Vec<C64> {
    let mut e = vec![C64::new(0.0, 0.0); n];
    e[i] = C64::new(1.0, 0.0);
    e
}

/// Rotates `v` so that its first non-negligible entry is real and nonnegative.
pub fn phase_normalize(v: &mut [C64]) {
    let threshold = 1e-12 * norm(v);
    if let Some(first) = v.iter().find(|z| z.norm() > threshold).copied() {
        let rot = first.conj() / first.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

/// Lower-triangular `L` with `L L^H = A + shift I`.
///
/// Pivots that fall below `EPS_PSD` times the largest diagonal entry of `A`
/// (in the negative direction) are rejected; non-negative pivots that are
/// numerically zero produce a zero column, which keeps the factorisation
/// usable for singular PSD inputs.
pub fn cholesky_psd(a: &HermitianPsd, shift: f64) -> Result<ComplexMatrix> {
    if !(shift >= 0.0) {
        return Err(Error::InvalidInput(
            "cholesky shift must be nonnegative".into(),
        ));
    }
    let n = a.dim();
    let scale = a.max_diagonal().max(shift);
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j).re + shift;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d < -EPS_PSD * scale {
            return Err(Error::NotPsd { index: j, pivot: d });
        }
        if d <= f64::EPSILON * scale * n as f64 || d <= 0.0 {
            // Numerically singular direction: remaining entries of the column
            // must vanish for a PSD input, so the column is left at zero.
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L^H x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &ComplexMatrix, b: &[C64]) -> Result<Vec<C64>> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        if l[(i, i)].re <= 0.0 {
            return Err(Error::InvalidInput("singular factor".into()));
        }
        y[i] = s / l[(i, i)].re;
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)].conj() * y[k];
        }
        y[i] = s / l[(i, i)].re;
    }
    Ok(y)
}

/// Unit vector `v` maximising `||A^H v||`, by power iteration on `A A^H`.
pub fn dominant_left_singular_vector(
    a: &ComplexMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<C64>> {
    let n = a.rows();
    if n == 0 || a.frobenius_norm() == 0.0 {
        return Err(Error::InvalidInput(
            "dominant singular vector of a zero matrix".into(),
        ));
    }
    let gram = HermitianPsd::gram(a);
    // Fixed start: e_1 plus a small deterministic perturbation so that no
    // dominant direction is exactly orthogonal to it.
    let mut v: Vec<C64> = (0..n)
        .map(|i| {
            let base = if i == 0 { 1.0 } else { 0.0 };
            C64::new(base + 1e-3 * (i + 1) as f64, 1e-4 * i as f64)
        })
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|z| *z /= nv);

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = gram.mul_vec(&v);
        let lambda = dot(&v, &w).re;
        residual = norm(
            &w.iter()
                .zip(&v)
                .map(|(a, b)| a - b * lambda)
                .collect::<Vec<_>>(),
        );
        if lambda > 0.0 && residual <= tol * lambda {
            phase_normalize(&mut v);
            return Ok(v);
        }
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        v = w.iter().map(|z| z / nw).collect();
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &ComplexMatrix) -> Vec<f64> {
    let gram = HermitianPsd::gram(&a.adjoint());
    let mut sv: Vec<f64> = gram
        .eigenvalues()
        .into_iter()
        .map(|x| x.max(0.0).sqrt())
        .collect();
    sv.reverse();
    sv
}

/// Normalised zero-forcing directions built from the columns of `h_est`
/// (one column per user).
pub fn zf_directions(h_est: &ComplexMatrix) -> Result<Vec<Vec<C64>>> {
    let (nt, k) = (h_est.rows(), h_est.cols());
    if k == 0 || k > nt {
        return Err(Error::Dimension(format!(
            "zero-forcing needs 1 <= K <= Nt, got K={k}, Nt={nt}"
        )));
    }
    let sv = singular_values(h_est);
    let ratio = if sv[0] > 0.0 { sv[k - 1] / sv[0] } else { 0.0 };
    if ratio < EPS_RANK {
        return Err(Error::RankDeficient { ratio });
    }
    // W = H (H^H H)^{-1}, so H^H W = I.
    let gram = HermitianPsd::gram(&h_est.adjoint());
    let l = cholesky_psd(&gram, 0.0)?;
    let mut dirs = Vec::with_capacity(k);
    for user in 0..k {
        let x = cholesky_solve(&l, &unit_vector(k, user))?;
        let mut p = h_est.mul_vec(&x);
        let np = norm(&p);
        p.iter_mut().for_each(|z| *z /= np);
        phase_normalize(&mut p);
        dirs.push(p);
    }
    Ok(dirs)
}

/// Matched-beamforming directions `h_k / ||h_k||`.
pub fn mf_directions(h_est: &ComplexMatrix) -> Result<Vec<Vec<C64>>> {
    (0..h_est.cols())
        .map(|user| {
            let mut h = h_est.column(user);
            let nh = norm(&h);
            if nh == 0.0 {
                return Err(Error::ZeroChannel { user });
            }
            h.iter_mut().for_each(|z| *z /= nh);
            phase_normalize(&mut h);
            Ok(h)
        })
        .collect()
}
