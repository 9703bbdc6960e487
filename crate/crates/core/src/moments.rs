//! Sample moments of an indicator dataset.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// `n` observations on `(X, Y)`; columns `0..p` hold X, columns `p..p+r` hold Y.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    p: usize,
    r: usize,
    rows: DMatrix<f64>,
}

impl Dataset {
    pub fn new(rows: DMatrix<f64>, p: usize, r: usize) -> Result<Self> {
        if p == 0 || r == 0 {
            return Err(Error::Dimension("p and r must be positive".into()));
        }
        if rows.ncols() != p + r {
            return Err(Error::Dimension(alloc::format!(
                "dataset has {} columns, expected p + r = {}",
                rows.ncols(),
                p + r
            )));
        }
        for (row, line) in rows.row_iter().enumerate() {
            if let Some(col) = line.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self { p, r, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn x(&self) -> DMatrix<f64> {
        self.rows.columns(0, self.p).into_owned()
    }

    pub fn y(&self) -> DMatrix<f64> {
        self.rows.columns(self.p, self.r).into_owned()
    }
}

/// Means and maximum-likelihood (divisor `n`) covariances of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub n: usize,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub s_x: DMatrix<f64>,
    pub s_y: DMatrix<f64>,
    /// r × p.
    pub s_yx: DMatrix<f64>,
}

impl SampleMoments {
    pub fn p(&self) -> usize {
        self.s_x.nrows()
    }

    pub fn r(&self) -> usize {
        self.s_y.nrows()
    }

    /// p × r.
    pub fn s_xy(&self) -> DMatrix<f64> {
        self.s_yx.transpose()
    }

    /// Treats population blocks as if they were sample moments.
    pub fn from_population(s_x: DMatrix<f64>, s_y: DMatrix<f64>, s_yx: DMatrix<f64>, n: usize) -> Self {
        let (p, r) = (s_x.nrows(), s_y.nrows());
        Self {
            n,
            mean_x: DVector::zeros(p),
            mean_y: DVector::zeros(r),
            s_x,
            s_y,
            s_yx,
        }
    }

    /// Moments of the composites `phiᵀX` and `gammaᵀY`.
    pub fn project(&self, phi: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Self {
        Self {
            n: self.n,
            mean_x: phi.transpose() * &self.mean_x,
            mean_y: gamma.transpose() * &self.mean_y,
            s_x: linalg::symmetrize(&(phi.transpose() * &self.s_x * phi)),
            s_y: linalg::symmetrize(&(gamma.transpose() * &self.s_y * gamma)),
            s_yx: gamma.transpose() * &self.s_yx * phi,
        }
    }

    /// Joint covariance of (X, Y) as a (p + r) square matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let (p, r) = (self.p(), self.r());
        let mut s = DMatrix::zeros(p + r, p + r);
        s.view_mut((0, 0), (p, p)).copy_from(&self.s_x);
        s.view_mut((p, p), (r, r)).copy_from(&self.s_y);
        s.view_mut((p, 0), (r, p)).copy_from(&self.s_yx);
        s.view_mut((0, p), (p, r)).copy_from(&self.s_xy());
        s
    }
}

/// Column means and divisor-`n` covariances.
pub fn compute_moments(data: &Dataset) -> Result<SampleMoments> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let rows = data.rows();
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = linalg::symmetrize(&(centered.transpose() * &centered / n as f64));
    let (p, r) = (data.p(), data.r());
    Ok(SampleMoments {
        n,
        mean_x: mean.rows(0, p).into_owned(),
        mean_y: mean.rows(p, r).into_owned(),
        s_x: cov.view((0, 0), (p, p)).into_owned(),
        s_y: cov.view((p, p), (r, r)).into_owned(),
        s_yx: cov.view((p, 0), (r, p)).into_owned(),
    })
}

/// `Σ̂_Y^{-1/2} Σ̂_YX Σ̂_X^{-1/2}` with symmetric inverse square roots. Its
/// singular values are the sample canonical correlations.
pub fn standardized_cross_cov(m: &SampleMoments) -> Result<DMatrix<f64>> {
    let sx = linalg::inv_sqrt_pd(&m.s_x, "s_x")?;
    let sy = linalg::inv_sqrt_pd(&m.s_y, "s_y")?;
    Ok(sy * &m.s_yx * sx)
}
