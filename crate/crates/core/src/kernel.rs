//! Tuned/Correlated (TC) kernel algebra.
//!
//! The TC kernel `k(t, s; beta) = beta^max(t, s)` has an inverse that factors as
//! `K^-1 = U' W U`, where `U` is unit upper-bidiagonal with `-1` on the
//! superdiagonal and `W` is diagonal. Everything here works on that factored
//! form: `U` is never stored and `W` is kept as a vector, so products, traces
//! and determinants are `O(T)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};

/// Lower clamp applied to `beta` before any factored computation.
pub const BETA_MIN: f64 = 1e-4;
/// Upper clamp applied to `beta` before any factored computation.
pub const BETA_MAX: f64 = 1.0 - 1e-4;

/// Decay rate of a TC kernel, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TcKernelParam(f64);

impl TcKernelParam {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 && beta < 1.0 {
            Ok(Self(beta))
        } else {
            Err(NetinfError::param("beta", format!("{beta} is outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The value actually used by the factored algebra.
    pub fn clamped(self) -> f64 {
        clamp_beta(self.0)
    }
}

impl TryFrom<f64> for TcKernelParam {
    type Error = NetinfError;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<TcKernelParam> for f64 {
    fn from(p: TcKernelParam) -> f64 {
        p.0
    }
}

#[inline]
pub fn clamp_beta(beta: f64) -> f64 {
    beta.clamp(BETA_MIN, BETA_MAX)
}

/// `beta^max(t, s)` for lags `t, s >= 1`.
pub fn tc_kernel_entry(t: usize, s: usize, beta: TcKernelParam) -> f64 {
    assert!(t >= 1 && s >= 1, "TC kernel lags start at 1");
    beta.value().powi(t.max(s) as i32)
}

/// Dense `T x T` kernel matrix. Only meant for oracles and small problems.
pub fn tc_kernel_matrix(dim: usize, beta: TcKernelParam) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| tc_kernel_entry(i + 1, j + 1, beta))
}

/// Diagonal entry `j` (0-based) of `W` for a `dim x dim` kernel with decay `beta`.
///
/// `beta` is expected to be clamped already.
#[inline]
pub fn tc_weight(j: usize, dim: usize, beta: f64) -> f64 {
    if j + 1 < dim {
        1.0 / (beta.powi(j as i32 + 1) * (1.0 - beta))
    } else {
        1.0 / beta.powi(dim as i32)
    }
}

/// Fills `out` with the `W` diagonal for a kernel of size `out.len()`.
pub fn tc_weights_into(beta: f64, out: &mut [f64]) {
    let dim = out.len();
    let one_minus = 1.0 - beta;
    let mut pow = 1.0;
    for (j, w) in out.iter_mut().enumerate() {
        pow *= beta;
        *w = if j + 1 < dim { 1.0 / (pow * one_minus) } else { 1.0 / pow };
    }
}

/// `log |K|` for a `dim x dim` TC kernel: `T(T+1)/2 log beta + (T-1) log(1-beta)`.
///
/// `beta` is expected to be clamped already.
#[inline]
pub fn tc_log_det_raw(dim: usize, beta: f64) -> f64 {
    let t = dim as f64;
    0.5 * t * (t + 1.0) * beta.ln() + (t - 1.0) * (1.0 - beta).ln()
}

/// `log |K|` without ever forming the determinant itself.
pub fn tc_log_determinant(dim: usize, beta: TcKernelParam) -> Result<f64> {
    check_dim(dim)?;
    Ok(tc_log_det_raw(dim, beta.clamped()))
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(NetinfError::param("T", "kernel dimension must be at least 1"))
    } else {
        Ok(())
    }
}

/// A matrix of the form `U' diag(w) U` with the shared bidiagonal `U`.
///
/// Exact TC inverses and averages of TC inverses (which share `U`) both have
/// this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcDecomposition {
    w_diag: Vec<f64>,
}

impl TcDecomposition {
    pub fn from_weights(w_diag: Vec<f64>) -> Result<Self> {
        check_dim(w_diag.len())?;
        if let Some(bad) = w_diag.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(NetinfError::param("w_diag", format!("entry {bad} is not positive and finite")));
        }
        Ok(Self { w_diag })
    }

    pub fn dim(&self) -> usize {
        self.w_diag.len()
    }

    pub fn w_diag(&self) -> &[f64] {
        &self.w_diag
    }

    /// Dense `U` (unit diagonal, `-1` superdiagonal).
    pub fn u_matrix(&self) -> DMatrix<f64> {
        let t = self.dim();
        DMatrix::from_fn(t, t, |i, j| {
            if i == j {
                1.0
            } else if j == i + 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Dense `U' W U`, which is tridiagonal.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let t = self.dim();
        let w = &self.w_diag;
        let mut m = DMatrix::zeros(t, t);
        for j in 0..t {
            m[(j, j)] = w[j] + if j > 0 { w[j - 1] } else { 0.0 };
            if j + 1 < t {
                m[(j, j + 1)] = -w[j];
                m[(j + 1, j)] = -w[j];
            }
        }
        m
    }

    /// Dense `(U' W U)^-1`; entry `(i, j)` is `sum_{k >= max(i, j)} 1 / w_k`.
    pub fn inverse_dense(&self) -> DMatrix<f64> {
        let t = self.dim();
        let mut tail = vec![0.0; t + 1];
        for k in (0..t).rev() {
            tail[k] = tail[k + 1] + 1.0 / self.w_diag[k];
        }
        DMatrix::from_fn(t, t, |i, j| tail[i.max(j)])
    }

    /// `log |U' W U| = sum log w_j`.
    pub fn log_det(&self) -> f64 {
        self.w_diag.iter().map(|w| w.ln()).sum()
    }

    /// `trace(U' W U B)` for a square `B` of matching size.
    pub fn trace_product(&self, b: &DMatrix<f64>) -> f64 {
        self.w_diag.iter().zip(bidiag_quadratic_diag(b)).map(|(w, a)| w * a).sum()
    }
}

/// Diagonal of `U B U'`: `B_jj - B_j,j+1 - B_j+1,j + B_j+1,j+1`, last entry `B_TT`.
pub fn bidiag_quadratic_diag(b: &DMatrix<f64>) -> Vec<f64> {
    let t = b.nrows();
    debug_assert_eq!(t, b.ncols());
    (0..t)
        .map(|j| {
            if j + 1 < t {
                b[(j, j)] - b[(j, j + 1)] - b[(j + 1, j)] + b[(j + 1, j + 1)]
            } else {
                b[(j, j)]
            }
        })
        .collect()
}

/// Factored inverse of the `dim x dim` TC kernel.
pub fn tc_inverse_decomposition(dim: usize, beta: TcKernelParam) -> Result<TcDecomposition> {
    check_dim(dim)?;
    let mut w = vec![0.0; dim];
    tc_weights_into(beta.clamped(), &mut w);
    TcDecomposition::from_weights(w)
}

/// Mean of the `W` factors over samples, sharing one `U`.
pub fn mean_inverse_decomposition(dim: usize, samples: &[TcKernelParam]) -> Result<TcDecomposition> {
    check_dim(dim)?;
    if samples.is_empty() {
        return Err(NetinfError::usage("expected inverse kernel needs at least one beta sample"));
    }
    let mut acc = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    for s in samples {
        tc_weights_into(s.clamped(), &mut w);
        for (a, x) in acc.iter_mut().zip(&w) {
            *a += x;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    TcDecomposition::from_weights(acc)
}

/// Sample average of `K^-1` as a dense symmetric matrix.
pub fn expected_inverse_kernel(dim: usize, samples: &[TcKernelParam]) -> Result<DMatrix<f64>> {
    Ok(mean_inverse_decomposition(dim, samples)?.to_dense())
}
