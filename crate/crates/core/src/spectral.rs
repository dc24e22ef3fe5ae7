//! Bi-orthogonal modes of a head: the thin SVD of `W = W_Q W_Kᵀ`, plus the
//! spectral diagnostics built on it (stable rank, query-key alignment,
//! normalized spectrum).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{argmax_abs, dot, norm, svd, thin_qr, Matrix};

/// Singular triple set `(U, σ, V)` of one head's interaction matrix.
///
/// `U` and `V` are `d x K` with `K = min(d, d_h)`; `σ` is descending.
/// The sign of each pair is fixed so that the largest-magnitude entry of
/// `u_i` is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis {
    pub layer: usize,
    pub head: usize,
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl ModeBasis {
    pub fn with_index(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn num_modes(&self) -> usize {
        self.sigma.len()
    }

    pub fn u_col(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }

    pub fn v_col(&self, i: usize) -> Vec<f64> {
        self.v.column(i)
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.v).expect("U and V share K")
    }

    /// Count of singular values above `rel · σ_1`.
    pub fn nonzero_modes(&self, rel: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > rel * top).count()
    }
}

/// `W = W_Q W_Kᵀ` for `d x d_h` slices.
pub fn interaction_matrix(wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    check_weights(wq, wk)?;
    wq.matmul_t(wk)
}

fn check_weights(wq: &Matrix, wk: &Matrix) -> Result<()> {
    if wq.shape() != wk.shape() {
        return Err(dim_err(format!(
            "W_Q is {:?} but W_K is {:?}",
            wq.shape(),
            wk.shape()
        )));
    }
    if wq.cols() == 0 {
        return Err(Error::Argument("head dimension must be at least 1".into()));
    }
    if !wq.is_finite() || !wk.is_finite() {
        return Err(Error::Data("non-finite query/key weights".into()));
    }
    Ok(())
}

/// Thin SVD of `W_Q W_Kᵀ` with rank capped at `K = min(d, d_h)`.
///
/// When `d_h < d` the product is never formed: `W_Q = Q_q R_q` and
/// `W_K = Q_k R_k` reduce the problem to the `d_h x d_h` core `R_q R_kᵀ`.
pub fn decompose_head(wq: &Matrix, wk: &Matrix) -> Result<ModeBasis> {
    check_weights(wq, wk)?;
    let (d, dh) = wq.shape();
    let (u, sigma, v) = if dh < d {
        let (qq, rq) = thin_qr(wq)?;
        let (qk, rk) = thin_qr(wk)?;
        let core = rq.matmul_t(&rk)?;
        let s = svd(&core);
        (qq.matmul(&s.u)?, s.sigma, qk.matmul(&s.v)?)
    } else {
        let s = svd(&wq.matmul_t(wk)?);
        (s.u, s.sigma, s.v)
    };
    let mut basis = ModeBasis {
        layer: 0,
        head: 0,
        u,
        sigma,
        v,
    };
    fix_signs(&mut basis);
    Ok(basis)
}

fn fix_signs(basis: &mut ModeBasis) {
    for i in 0..basis.num_modes() {
        let col = basis.u.column(i);
        if col[argmax_abs(&col)] < 0.0 {
            for r in 0..basis.u.rows() {
                basis.u[(r, i)] = -basis.u[(r, i)];
                basis.v[(r, i)] = -basis.v[(r, i)];
            }
        }
    }
}

/// `Σ σ_i² / σ_1²`.
pub fn stable_rank(basis: &ModeBasis) -> Result<f64> {
    let top = basis.sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::UndefinedRank);
    }
    let total: f64 = basis.sigma.iter().map(|s| s * s).sum();
    Ok(total / (top * top))
}

/// `cos(u_i, v_i) · σ_i` per mode.
pub fn mode_alignment(basis: &ModeBasis) -> Vec<f64> {
    (0..basis.num_modes())
        .map(|i| {
            let u = basis.u.column(i);
            let v = basis.v.column(i);
            let denom = norm(&u) * norm(&v);
            if denom == 0.0 {
                0.0
            } else {
                dot(&u, &v) / denom * basis.sigma[i]
            }
        })
        .collect()
}

/// Query and key codes `z_Q = A U`, `z_K = A V`, each `[T, K]`.
pub fn projected_codes(activations: &Matrix, basis: &ModeBasis) -> Result<(Matrix, Matrix)> {
    if activations.cols() != basis.dim() {
        return Err(dim_err(format!(
            "activation width {} but modes live in dimension {}",
            activations.cols(),
            basis.dim()
        )));
    }
    Ok((activations.matmul(&basis.u)?, activations.matmul(&basis.v)?))
}

/// `Σ_i z_Q[:,i] σ_i z_K[:,i]ᵀ`, a `[T_q, T_k]` score matrix.
pub fn mode_sum(zq: &Matrix, sigma: &[f64], zk: &Matrix) -> Result<Matrix> {
    if zq.cols() != sigma.len() || zk.cols() != sigma.len() {
        return Err(dim_err("codes and spectrum disagree on K"));
    }
    let mut scaled = zq.clone();
    for r in 0..scaled.rows() {
        for (c, s) in sigma.iter().enumerate() {
            scaled[(r, c)] *= s;
        }
    }
    scaled.matmul_t(zk)
}

/// Per-head spectral diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    pub layer: usize,
    pub head: usize,
    pub stable_rank: f64,
    pub alignment: Vec<f64>,
    /// `σ_i / σ_1`
    pub spectrum: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn summarize(basis: &ModeBasis) -> Result<SpectralSummary> {
    let stable_rank = stable_rank(basis)?;
    let top = basis.sigma[0];
    Ok(SpectralSummary {
        layer: basis.layer,
        head: basis.head,
        stable_rank,
        alignment: mode_alignment(basis),
        spectrum: basis.sigma.iter().map(|s| s / top).collect(),
        sigma: basis.sigma.clone(),
    })
}

/// σ-weighted mean alignment over every mode of every head in a layer,
/// weights `σ_i / Σ σ_j`. `None` when all singular values vanish.
pub fn weighted_layer_alignment(summaries: &[SpectralSummary]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in summaries {
        for (a, w) in s.alignment.iter().zip(&s.sigma) {
            num += a * w;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn basis_with_sigma(sigma: &[f64]) -> ModeBasis {
        let k = sigma.len();
        ModeBasis {
            layer: 0,
            head: 0,
            u: Matrix::identity(k),
            sigma: sigma.to_vec(),
            v: Matrix::identity(k),
        }
    }

    #[test]
    fn identity_weights_give_unit_spectrum() {
        let i = Matrix::identity(5);
        let b = decompose_head(&i, &i).unwrap();
        assert!(b.sigma.iter().all(|s| libm::fabs(s - 1.0) < 1e-12));
        let uvt = b.u.matmul_t(&b.v).unwrap();
        assert!(uvt.max_abs_diff(&Matrix::identity(5)) < 1e-12);
        assert!(libm::fabs(stable_rank(&b).unwrap() - 5.0) < 1e-12);
    }

    #[test]
    fn zero_key_weights_give_zero_spectrum() {
        let wq = lcg(6, 3, 1);
        let b = decompose_head(&wq, &Matrix::zeros(6, 3)).unwrap();
        assert!(b.sigma.iter().all(|&s| s == 0.0));
        assert_eq!(stable_rank(&b), Err(Error::UndefinedRank));
        let g = b.u.transpose().matmul(&b.u).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn stable_rank_hand_values() {
        assert_eq!(stable_rank(&basis_with_sigma(&[2.0, 1.0, 1.0])).unwrap(), 1.5);
        assert_eq!(stable_rank(&basis_with_sigma(&[3.0, 0.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn negative_identity_is_anti_aligned() {
        let mut wq = Matrix::identity(4);
        wq.scale(-1.0);
        let b = decompose_head(&wq, &Matrix::identity(4)).unwrap();
        for a in mode_alignment(&b) {
            assert!(libm::fabs(a + 1.0) < 1e-12);
        }
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let b = decompose_head(&lcg(8, 4, 9), &lcg(8, 4, 10)).unwrap();
        for i in 0..b.num_modes() {
            let u = b.u.column(i);
            assert!(u[argmax_abs(&u)] > 0.0);
        }
    }

    #[test]
    fn wide_heads_use_full_svd() {
        // d_h > d: K = d.
        let wq = lcg(3, 5, 2);
        let wk = lcg(3, 5, 3);
        let b = decompose_head(&wq, &wk).unwrap();
        assert_eq!(b.num_modes(), 3);
        let w = interaction_matrix(&wq, &wk).unwrap();
        assert!(b.reconstruct().relative_frobenius_error(&w) < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        assert!(decompose_head(&Matrix::zeros(4, 2), &Matrix::zeros(4, 3)).is_err());
        let mut bad = Matrix::zeros(2, 2);
        bad[(0, 0)] = f64::INFINITY;
        assert!(matches!(decompose_head(&bad, &Matrix::zeros(2, 2)), Err(Error::Data(_))));
        let b = decompose_head(&lcg(4, 2, 1), &lcg(4, 2, 2)).unwrap();
        assert!(projected_codes(&Matrix::zeros(3, 5), &b).is_err());
    }
}
