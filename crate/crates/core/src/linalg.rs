//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Every positive-definiteness decision goes through [`EIG_FLOOR`]: a
//! symmetric matrix is treated as PD when its smallest eigenvalue exceeds
//! `EIG_FLOOR` times its largest.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Relative eigenvalue floor used for PD checks and inverse square roots.
pub const EIG_FLOOR: f64 = 1e-12;

/// Relative tolerance below which a singular value counts as zero for rank-1 checks.
pub const RANK1_TOL: f64 = 1e-10;

/// Symmetric part `(m + mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order. Columns of the returned matrix are the eigenvectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Ratio of the largest to the smallest eigenvalue (infinite when the
/// smallest is not positive).
pub fn condition_number(values: &DVector<f64>) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let max = values.max();
    let min = values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn pd_eigen(m: &DMatrix<f64>, block: &'static str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            block,
            condition: f64::INFINITY,
        });
    }
    let (values, vectors) = sym_eigen_desc(m);
    if values.is_empty() {
        return Ok((values, vectors));
    }
    let max = values[0];
    let min = values[values.len() - 1];
    if max <= 0.0 || min <= EIG_FLOOR * max {
        return Err(Error::NotPositiveDefinite {
            block,
            condition: condition_number(&values),
        });
    }
    Ok((values, vectors))
}

/// Returns `Ok(())` when `m` is symmetric positive definite under [`EIG_FLOOR`].
pub fn check_pd(m: &DMatrix<f64>, block: &'static str) -> Result<()> {
    pd_eigen(m, block).map(|_| ())
}

fn spectral_map(values: &DVector<f64>, vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[j]);
    }
    symmetrize(&(scaled * vectors.transpose()))
}

/// Inverse of a symmetric PD matrix.
pub fn inv_pd(m: &DMatrix<f64>, block: &'static str) -> Result<DMatrix<f64>> {
    let (values, vectors) = pd_eigen(m, block)?;
    Ok(spectral_map(&values, &vectors, |v| 1.0 / v))
}

/// Symmetric inverse square root of a PD matrix.
pub fn inv_sqrt_pd(m: &DMatrix<f64>, block: &'static str) -> Result<DMatrix<f64>> {
    let (values, vectors) = pd_eigen(m, block)?;
    Ok(spectral_map(&values, &vectors, |v| 1.0 / v.sqrt()))
}

/// Symmetric square root of a PSD matrix; negative rounding noise is clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_desc(m);
    spectral_map(&values, &vectors, |v| v.max(0.0).sqrt())
}

/// `log det` of a symmetric PD matrix via Cholesky.
pub fn log_det_pd(m: &DMatrix<f64>, block: &'static str) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = symmetrize(m).cholesky().ok_or(Error::NotPositiveDefinite {
        block,
        condition: f64::INFINITY,
    })?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Flips `v` in place so that its first non-negligible entry is positive.
/// Returns `true` when a flip happened.
pub fn normalize_sign(v: &mut DVector<f64>) -> bool {
    let scale = v.amax();
    if scale == 0.0 {
        return false;
    }
    let tol = 1e-12 * scale;
    if let Some(first) = v.iter().copied().find(|x| x.abs() > tol) {
        if first < 0.0 {
            v.neg_mut();
            return true;
        }
    }
    false
}

/// Leading singular triple `(u₁, d₁, v₁)` of `m` plus the second singular
/// value (zero when the matrix has a single singular value).
pub struct LeadingSingular {
    pub u: DVector<f64>,
    pub d1: f64,
    pub v: DVector<f64>,
    pub d2: f64,
}

pub fn leading_singular(m: &DMatrix<f64>) -> LeadingSingular {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return LeadingSingular {
            u: DVector::zeros(rows),
            d1: 0.0,
            v: DVector::zeros(cols),
            d2: 0.0,
        };
    }
    let svd = m.clone().svd(true, true);
    let u_mat = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let sv = &svd.singular_values;
    let mut best = 0;
    for i in 1..sv.len() {
        if sv[i] > sv[best] {
            best = i;
        }
    }
    let d2 = (0..sv.len())
        .filter(|&i| i != best)
        .map(|i| sv[i])
        .fold(0.0, f64::max);
    // The iterative SVD can stop a few digits short on tiny, nearly rank-one
    // inputs. Alternating power steps from its answer restore full accuracy.
    let mut u = u_mat.column(best).into_owned();
    let mut v = vt.row(best).transpose();
    let mut d1 = sv[best];
    for _ in 0..100 {
        let mv = m * &v;
        let norm_u = mv.norm();
        if norm_u == 0.0 {
            break;
        }
        u = mv / norm_u;
        let mu = m.transpose() * &u;
        let next = mu.norm();
        v = mu / next;
        let done = (next - d1).abs() <= f64::EPSILON * next;
        d1 = next;
        if done {
            break;
        }
    }
    LeadingSingular { u, d1, v, d2 }
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Columns that
/// are numerically dependent on earlier ones are dropped.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for col in m.column_iter() {
        let mut v = col.into_owned();
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * scale {
            kept.push(v / norm);
        }
    }
    let mut out = DMatrix::zeros(n, kept.len());
    for (j, q) in kept.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

/// Extends the orthonormal columns of `basis` to exactly `target` orthonormal
/// columns by appending coordinate directions, first column block preserved.
pub fn complete_basis(basis: &DMatrix<f64>, target: usize) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut m = DMatrix::zeros(n, basis.ncols() + n);
    m.view_mut((0, 0), (n, basis.ncols())).copy_from(basis);
    m.view_mut((0, basis.ncols()), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    let q = orthonormal_columns(&m);
    q.columns(0, target.min(q.ncols())).into_owned()
}

/// Orthonormal basis of the orthogonal complement of span(`basis`), where
/// `basis` has orthonormal columns.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let u = basis.ncols();
    let full = complete_basis(basis, n);
    full.columns(u, n - u).into_owned()
}

/// Sine of the largest principal angle between span(`a`) and span(`b`),
/// both given by orthonormal columns of equal count.
pub fn max_principal_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let proj = a * (a.transpose() * b);
    spectral_norm(&(b - proj))
}

/// Largest principal angle in radians.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_principal_angle_sin(a, b).min(1.0).asin()
}

/// `‖aᵀa − I‖_max`, the departure from semi-orthogonality.
pub fn orthogonality_defect(a: &DMatrix<f64>) -> f64 {
    let k = a.ncols();
    let gram = a.transpose() * a;
    (gram - DMatrix::<f64>::identity(k, k)).amax()
}
