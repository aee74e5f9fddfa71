//! Dense symmetric linear algebra in `f64` for the Fréchet distance.
//! Matrices are row-major `n x n` slices.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
pub const EIGEN_CLAMP: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
    pub n: usize,
}

fn check_square(a: &[f64], n: usize) -> Result<()> {
    if a.len() != n * n {
        return Err(Error::Shape(format!(
            "{} entries for a {n}x{n} matrix",
            a.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen> {
    check_square(a, n)?;
    let mut m = a.to_vec();
    // Symmetrize away round-off.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            let values = (0..n).map(|i| m[i * n + i]).collect();
            return Ok(SymmetricEigen {
                values,
                vectors: v,
                n,
            });
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Entries below round-off of their diagonal, or of the whole
                // matrix, cannot be reduced further.
                if apq.abs() <= f64::EPSILON * 0.5 * (app.abs() + aqq.abs())
                    || apq.abs() <= 1e-3 * tol
                {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            let values = (0..n).map(|i| m[i * n + i]).collect();
            return Ok(SymmetricEigen {
                values,
                vectors: v,
                n,
            });
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below [`EIGEN_CLAMP`] are treated as zero; clearly negative
/// eigenvalues are an error.
pub fn sqrt_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let e = symmetric_eigen(a, n)?;
    let roots = clamped_roots(&e)?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n)
                .map(|k| e.vectors[i * n + k] * roots[k] * e.vectors[j * n + k])
                .sum();
        }
    }
    Ok(out)
}

fn clamped_roots(e: &SymmetricEigen) -> Result<Vec<f64>> {
    let largest = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-6 * largest.max(1.0);
    e.values
        .iter()
        .map(|&l| {
            if l < floor {
                Err(Error::Numerical(format!(
                    "matrix is not positive semidefinite (eigenvalue {l:e})"
                )))
            } else if l < EIGEN_CLAMP {
                Ok(0.0)
            } else {
                Ok(l.sqrt())
            }
        })
        .collect()
}

/// `tr(sqrt(A))` for symmetric PSD `A`.
pub fn trace_sqrt_psd(a: &[f64], n: usize) -> Result<f64> {
    let e = symmetric_eigen(a, n)?;
    Ok(clamped_roots(&e)?.iter().sum())
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}
