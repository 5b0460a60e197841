//! Cyclic Jacobi eigenvalues of symmetric matrices.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to `‖K‖_F`, at which sweeps stop.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Eigenvalues below `−PSD_TOL · λ_max` are reported as genuinely negative.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Descending. Negatives above `−PSD_TOL · λ_max` are clamped to zero.
    pub values: Vec<f64>,
    /// Eigenvalues below `−PSD_TOL · λ_max`, kept unclamped in `values`.
    pub significant_negatives: usize,
    pub sweeps: usize,
}

impl Spectrum {
    pub fn is_psd(&self) -> bool {
        self.significant_negatives == 0
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

fn off_diagonal(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Raw eigenvalues of `(K + Kᵀ)/2` in descending order, no clamping.
pub fn jacobi_eigvals(k: &Matrix) -> Result<(Vec<f64>, usize)> {
    if !k.is_square() {
        return Err(Error::shape("eigvals", format!("{}×{} is not square", k.rows, k.cols)));
    }
    let n = k.rows;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (k.get(i, j) + k.get(j, i));
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "eigvals" });
    }
    let tol = OFF_DIAGONAL_TOL * crate::linalg::frobenius(&a);
    let mut sweeps = 0;
    loop {
        let off = off_diagonal(&a, n);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (x, y) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * x - s * y;
                    a[r * n + q] = s * x + c * y;
                }
                for col in 0..n {
                    let (x, y) = (a[p * n + col], a[q * n + col]);
                    a[p * n + col] = c * x - s * y;
                    a[q * n + col] = s * x + c * y;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok((values, sweeps))
}

/// Descending eigenvalues of the symmetrized matrix with tiny negatives
/// clamped to zero and significant ones counted.
pub fn sym_eigvals(k: &Matrix) -> Result<Spectrum> {
    let (mut values, sweeps) = jacobi_eigvals(k)?;
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut significant_negatives = 0;
    for v in values.iter_mut() {
        if *v < -PSD_TOL * top {
            significant_negatives += 1;
        } else if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(Spectrum {
        values,
        significant_negatives,
        sweeps,
    })
}
