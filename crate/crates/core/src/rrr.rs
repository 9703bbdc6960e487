//! Rank-1 reduced-rank regression of Y on X.
//!
//! Under the reflexive model Σ_YX has rank one, so the maximum-likelihood
//! estimate of |cor{E(ξ|X), E(η|Y)}| is the leading singular value of the
//! standardized cross-covariance, i.e. the first sample canonical correlation.

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::linalg;
use crate::model::JointCov;
use crate::moments::{standardized_cross_cov, SampleMoments};

/// Relative gap below which the two leading singular values count as tied.
pub const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Fit {
    /// Rank-1 coefficient matrix of the regression of Y on X (r × p).
    pub beta_yx: DMatrix<f64>,
    /// Leading left singular vector of the standardized cross-covariance.
    pub a_dir: DVector<f64>,
    /// Leading right singular vector, first nonzero entry positive.
    pub b_dir: DVector<f64>,
    /// Leading singular value.
    pub d1: f64,
    /// Second singular value (zero when min(p, r) = 1).
    pub d2: f64,
    /// Set when d1 and d2 coincide and the direction is not well defined.
    pub tied: bool,
}

pub fn fit_rank1(m: &SampleMoments) -> Result<Rank1Fit> {
    let std_cross = standardized_cross_cov(m)?;
    let lead = linalg::leading_singular(&std_cross);
    let (r, p) = std_cross.shape();
    let tied = lead.d1 > 0.0 && lead.d2 >= lead.d1 * (1.0 - TIE_TOL);

    let (mut a_dir, mut b_dir) = if lead.d1 == 0.0 {
        (DVector::zeros(r), DVector::zeros(p))
    } else if tied {
        tie_break(&std_cross, lead.d1)
    } else {
        (lead.u, lead.v)
    };
    if linalg::normalize_sign(&mut b_dir) {
        a_dir.neg_mut();
    }

    let sy_half = linalg::sqrt_psd(&m.s_y);
    let sx_inv_half = linalg::inv_sqrt_pd(&m.s_x, "s_x")?;
    let beta_yx = sy_half * &a_dir * lead.d1 * b_dir.transpose() * sx_inv_half;
    Ok(Rank1Fit {
        beta_yx,
        a_dir,
        b_dir,
        d1: lead.d1,
        d2: lead.d2,
        tied,
    })
}

// Among right singular vectors sharing the top singular value, take the one
// closest to the first coordinate axis that has a nonzero projection.
fn tie_break(m: &DMatrix<f64>, d1: f64) -> (DVector<f64>, DVector<f64>) {
    let p = m.ncols();
    let gram = m.transpose() * m;
    let (values, vectors) = linalg::sym_eigen_desc(&gram);
    let top = d1 * d1;
    let k = values
        .iter()
        .take_while(|&&v| v >= top * (1.0 - 2.0 * TIE_TOL) - 1e-15)
        .count()
        .max(1);
    let basis = vectors.columns(0, k);
    for axis in 0..p {
        let coeff = basis.row(axis).transpose();
        let v = &basis * coeff;
        let norm = v.norm();
        if norm > 1e-8 {
            let b = v / norm;
            let a = (m * &b) / d1;
            return (a, b);
        }
    }
    (m * vectors.column(0) / d1, vectors.column(0).into_owned())
}

/// First sample canonical correlation, clamped to [0, 1].
pub fn estimate_cor_regression(m: &SampleMoments) -> Result<f64> {
    Ok(fit_rank1(m)?.d1.clamp(0.0, 1.0))
}

/// `tr^{1/2}(Σ_XY Σ_Y⁻¹ Σ_YX Σ_X⁻¹)`, the population value of
/// |cor{E(ξ|X), E(η|Y)}|.
pub fn population_cor_regression(cov: &JointCov) -> Result<f64> {
    let sx_inv = linalg::inv_pd(&cov.sigma_x(), "sigma_x")?;
    let sy_inv = linalg::inv_pd(&cov.sigma_y(), "sigma_y")?;
    let syx = cov.sigma_yx();
    let t = (syx.transpose() * sy_inv * &syx * sx_inv).trace();
    Ok(t.max(0.0).sqrt())
}
