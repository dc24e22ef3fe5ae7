//! Dense row-major matrices and the factorizations the analyses need:
//! Householder QR, one-sided Jacobi SVD and cyclic Jacobi eigendecomposition.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{dim_err, Result};

/// Dense `f64` matrix stored row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(alloc::format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(dim_err(alloc::format!(
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = out.row_mut(r);
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (ov, &bv) in o.iter_mut().zip(other.row(k)) {
                    *ov += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(dim_err(alloc::format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |r, c| {
            dot(self.row(r), other.row(c))
        }))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / ‖other‖_F` (absolute when `other` is zero).
    pub fn relative_frobenius_error(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let reference = other.frobenius_norm();
        if reference == 0.0 {
            libm::sqrt(diff)
        } else {
            libm::sqrt(diff) / reference
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Thin Householder QR of an `m x n` matrix with `m >= n`.
///
/// Returns `(Q, R)` with `Q` of shape `m x n` having orthonormal columns and
/// `R` upper triangular `n x n`. Rank-deficient input still yields an
/// orthonormal `Q`.
pub fn thin_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(dim_err(alloc::format!("thin_qr needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm(&v);
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm = norm(&v);
        v.iter_mut().for_each(|x| *x /= vnorm);
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    Ok((q, r))
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k` with orthonormal columns.
    pub u: Matrix,
    /// `k` values, descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `n x k` with orthonormal columns.
    pub v: Matrix,
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of an `m x n` matrix, `k = min(m, n)`.
///
/// Left vectors of zero singular values are completed to an orthonormal set,
/// so `UᵀU = I` holds for rank-deficient input too.
pub fn svd(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    if m < n {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }
    // Work column-major: columns of `work` are the columns of A.
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || libm::fabs(gamma) <= JACOBI_TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_pair(&mut work, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(usize, f64)> = work.iter().map(|c| norm(c)).enumerate().collect();
    // Stable sort: ties keep the routine's column order.
    order.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(core::cmp::Ordering::Equal));
    let k = n;
    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut v = Matrix::zeros(n, k);
    let zero_cut = sigma_max * (m as f64) * f64::EPSILON;
    for (slot, &(j, s)) in order.iter().enumerate() {
        for i in 0..n {
            v[(i, slot)] = vcols[j][i];
        }
        if s > zero_cut && s > 0.0 {
            sigma.push(s);
            u_cols.push(work[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(if s > 0.0 { s } else { 0.0 });
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, m);
    let u = Matrix::from_fn(m, k, |i, j| u_cols[j][i]);
    Svd { u, sigma, v }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (xp, xq) = (&mut lo[p], &mut hi[0]);
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (va, vb) = (*a, *b);
        *a = c * va - s * vb;
        *b = s * va + c * vb;
    }
}

/// Fill every empty column with a unit vector orthogonal to all others,
/// drawn from the standard basis by modified Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0usize;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < dim {
            let mut e: Vec<f64> = (0..dim).map(|i| if i == candidate { 1.0 } else { 0.0 }).collect();
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let len = norm(&e);
            if len > 1e-8 {
                e.iter_mut().for_each(|x| *x /= len);
                cols[j] = e;
                break;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (n, c) = a.shape();
    if n != c {
        return Err(dim_err(alloc::format!("symmetric_eigen on {n}x{c}")));
    }
    let mut m = a.clone();
    let mut vecs = Matrix::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off == 0.0 || off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0))
                };
                let cs = 1.0 / libm::sqrt(t * t + 1.0);
                let sn = t * cs;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = cs * mkp - sn * mkq;
                    m[(k, q)] = sn * mkp + cs * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = cs * mpk - sn * mqk;
                    m[(q, k)] = sn * mpk + cs * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[(k, p)];
                    let vkq = vecs[(k, q)];
                    vecs[(k, p)] = cs * vkp - sn * vkq;
                    vecs[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<(usize, f64)> = (0..n).map(|i| (i, m[(i, i)])).collect();
    order.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(core::cmp::Ordering::Equal));
    let values = order.iter().map(|o| o.1).collect();
    let sorted = Matrix::from_fn(n, n, |r, j| vecs[(r, order[j].0)]);
    Ok((values, sorted))
}

/// Index of the largest-magnitude entry (first one on ties).
pub(crate) fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if libm::fabs(*x) > libm::fabs(v[best]) {
            best = i;
        }
    }
    best
}
