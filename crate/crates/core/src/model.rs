//! Population model for two latent constructs ξ, η with reflexive indicator
//! blocks X ∈ ℝᵖ and Y ∈ ℝʳ:
//!
//! ```text
//! X = μ_X + β_{X|ξ} ξ + ε_X,   ε_X ~ N(0, Σ_{X|ξ})
//! Y = μ_Y + β_{Y|η} η + ε_Y,   ε_Y ~ N(0, Σ_{Y|η})
//! (ξ, η) ~ N(0, [[σ²_ξ, σ_ξη], [σ_ξη, σ²_η]])
//! ```
//!
//! The constructs are only defined up to scale, so a parameter set carries a
//! [`ConstraintMode`] that fixes either var(ξ) = var(η) = 1 (marginal) or
//! var{E(ξ|X)} = var{E(η|Y)} = 1 (regression).

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance used when checking that a parameter set satisfies its constraints.
pub const CONSTRAINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintMode {
    /// var(ξ) = var(η) = 1.
    Marginal,
    /// var{E(ξ|X)} = var{E(η|Y)} = 1.
    Regression,
}

/// Full population parameterization of the reflexive model.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    pub p: usize,
    pub r: usize,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub beta_x_xi: DVector<f64>,
    pub beta_y_eta: DVector<f64>,
    pub sigma_x_given_xi: DMatrix<f64>,
    pub sigma_y_given_eta: DMatrix<f64>,
    pub var_xi: f64,
    pub var_eta: f64,
    pub cov_xi_eta: f64,
    pub constraint_mode: ConstraintMode,
}

impl PathParams {
    /// Zero-mean parameters under marginal constraints with construct
    /// correlation `cor`.
    pub fn marginal(
        beta_x_xi: DVector<f64>,
        beta_y_eta: DVector<f64>,
        sigma_x_given_xi: DMatrix<f64>,
        sigma_y_given_eta: DMatrix<f64>,
        cor: f64,
    ) -> Result<Self> {
        let p = beta_x_xi.len();
        let r = beta_y_eta.len();
        let params = Self {
            p,
            r,
            mu_x: DVector::zeros(p),
            mu_y: DVector::zeros(r),
            beta_x_xi,
            beta_y_eta,
            sigma_x_given_xi,
            sigma_y_given_eta,
            var_xi: 1.0,
            var_eta: 1.0,
            cov_xi_eta: cor,
            constraint_mode: ConstraintMode::Marginal,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks every structural invariant, including the constraint that the
    /// declared mode imposes.
    pub fn validate(&self) -> Result<()> {
        let (p, r) = (self.p, self.r);
        if p == 0 || r == 0 {
            return Err(Error::InvalidParams("p and r must be positive".into()));
        }
        let dims_ok = self.mu_x.len() == p
            && self.beta_x_xi.len() == p
            && self.sigma_x_given_xi.shape() == (p, p)
            && self.mu_y.len() == r
            && self.beta_y_eta.len() == r
            && self.sigma_y_given_eta.shape() == (r, r);
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "vectors and matrices must conform to p = {p}, r = {r}"
            )));
        }
        let finite = self
            .mu_x
            .iter()
            .chain(self.mu_y.iter())
            .chain(self.beta_x_xi.iter())
            .chain(self.beta_y_eta.iter())
            .chain(self.sigma_x_given_xi.iter())
            .chain(self.sigma_y_given_eta.iter())
            .chain([self.var_xi, self.var_eta, self.cov_xi_eta].iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite parameter".into()));
        }
        check_symmetric(&self.sigma_x_given_xi, "sigma_x_given_xi")?;
        check_symmetric(&self.sigma_y_given_eta, "sigma_y_given_eta")?;
        linalg::check_pd(&self.sigma_x_given_xi, "sigma_x_given_xi")?;
        linalg::check_pd(&self.sigma_y_given_eta, "sigma_y_given_eta")?;
        if self.var_xi <= 0.0 || self.var_eta <= 0.0 {
            return Err(Error::InvalidParams("construct variances must be positive".into()));
        }
        let det = self.var_xi * self.var_eta - self.cov_xi_eta * self.cov_xi_eta;
        if det <= linalg::EIG_FLOOR * self.var_xi * self.var_eta {
            return Err(Error::InvalidParams(
                "construct covariance is not positive definite".into(),
            ));
        }
        match self.constraint_mode {
            ConstraintMode::Marginal => {
                if (self.var_xi - 1.0).abs() > CONSTRAINT_TOL || (self.var_eta - 1.0).abs() > CONSTRAINT_TOL {
                    return Err(Error::InvalidParams(
                        "marginal constraints require var_xi = var_eta = 1".into(),
                    ));
                }
            }
            ConstraintMode::Regression => {
                let (vx, vy) = population_reg_variances(self)?;
                if (vx - 1.0).abs() > CONSTRAINT_TOL || (vy - 1.0).abs() > CONSTRAINT_TOL {
                    return Err(Error::InvalidParams(format!(
                        "regression constraints require var E(xi|X) = var E(eta|Y) = 1, got ({vx}, {vy})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// cor(ξ, η).
    pub fn cor_xi_eta(&self) -> f64 {
        self.cov_xi_eta / (self.var_xi * self.var_eta).sqrt()
    }

    /// Flips ξ and/or η so that the first non-negligible entry of each loading
    /// vector is positive. The (X, Y) distribution is unchanged.
    pub fn sign_normalized(&self) -> Self {
        let mut out = self.clone();
        if linalg::normalize_sign(&mut out.beta_x_xi) {
            out.cov_xi_eta = -out.cov_xi_eta;
        }
        if linalg::normalize_sign(&mut out.beta_y_eta) {
            out.cov_xi_eta = -out.cov_xi_eta;
        }
        out
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidParams(format!("{name} is not symmetric")));
    }
    Ok(())
}

/// Covariance of (X, Y, ξ, η), ordered with X first, then Y, then ξ, then η.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCov {
    pub p: usize,
    pub r: usize,
    pub full: DMatrix<f64>,
}

impl JointCov {
    fn xi(&self) -> usize {
        self.p + self.r
    }

    fn eta(&self) -> usize {
        self.p + self.r + 1
    }

    pub fn sigma_x(&self) -> DMatrix<f64> {
        self.full.view((0, 0), (self.p, self.p)).into_owned()
    }

    pub fn sigma_y(&self) -> DMatrix<f64> {
        self.full.view((self.p, self.p), (self.r, self.r)).into_owned()
    }

    /// Σ_YX, an r × p block.
    pub fn sigma_yx(&self) -> DMatrix<f64> {
        self.full.view((self.p, 0), (self.r, self.p)).into_owned()
    }

    pub fn sigma_x_xi(&self) -> DVector<f64> {
        self.full.view((0, self.xi()), (self.p, 1)).column(0).into_owned()
    }

    pub fn sigma_x_eta(&self) -> DVector<f64> {
        self.full.view((0, self.eta()), (self.p, 1)).column(0).into_owned()
    }

    pub fn sigma_y_eta(&self) -> DVector<f64> {
        self.full.view((self.p, self.eta()), (self.r, 1)).column(0).into_owned()
    }

    pub fn sigma_y_xi(&self) -> DVector<f64> {
        self.full.view((self.p, self.xi()), (self.r, 1)).column(0).into_owned()
    }

    /// The 2 × 2 covariance of (ξ, η).
    pub fn construct(&self) -> DMatrix<f64> {
        self.full.view((self.xi(), self.xi()), (2, 2)).into_owned()
    }

    /// Covariance of the observable vector (X, Y).
    pub fn observed(&self) -> DMatrix<f64> {
        let m = self.p + self.r;
        self.full.view((0, 0), (m, m)).into_owned()
    }
}

/// Assembles the joint covariance of (X, Y, ξ, η).
pub fn joint_covariance(params: &PathParams) -> Result<JointCov> {
    params.validate()?;
    Ok(assemble(params))
}

fn assemble(params: &PathParams) -> JointCov {
    let (p, r) = (params.p, params.r);
    let bx = &params.beta_x_xi;
    let by = &params.beta_y_eta;
    let (vxi, veta, cxe) = (params.var_xi, params.var_eta, params.cov_xi_eta);
    let m = p + r + 2;
    let mut full = DMatrix::zeros(m, m);

    let sx = &params.sigma_x_given_xi + bx * bx.transpose() * vxi;
    let sy = &params.sigma_y_given_eta + by * by.transpose() * veta;
    let syx = by * bx.transpose() * cxe;
    full.view_mut((0, 0), (p, p)).copy_from(&linalg::symmetrize(&sx));
    full.view_mut((p, p), (r, r)).copy_from(&linalg::symmetrize(&sy));
    full.view_mut((p, 0), (r, p)).copy_from(&syx);
    full.view_mut((0, p), (p, r)).copy_from(&syx.transpose());

    let (xi, eta) = (p + r, p + r + 1);
    for i in 0..p {
        full[(i, xi)] = bx[i] * vxi;
        full[(i, eta)] = bx[i] * cxe;
    }
    for j in 0..r {
        full[(p + j, xi)] = by[j] * cxe;
        full[(p + j, eta)] = by[j] * veta;
    }
    for i in 0..p + r {
        full[(xi, i)] = full[(i, xi)];
        full[(eta, i)] = full[(i, eta)];
    }
    full[(xi, xi)] = vxi;
    full[(eta, eta)] = veta;
    full[(xi, eta)] = cxe;
    full[(eta, xi)] = cxe;
    JointCov { p, r, full }
}

fn quad_inv(m: &DMatrix<f64>, v: &DVector<f64>, block: &'static str) -> Result<f64> {
    let inv = linalg::inv_pd(m, block)?;
    Ok(v.dot(&(inv * v)))
}

/// `(var{E(ξ|X)}, var{E(η|Y)})`, i.e. `Σ_ξX Σ_X⁻¹ Σ_Xξ` and `Σ_ηY Σ_Y⁻¹ Σ_Yη`.
///
/// Under marginal constraints these are the fractions of construct variance
/// recovered from the indicators and lie in [0, 1); under regression
/// constraints both equal 1.
pub fn population_reg_variances(params: &PathParams) -> Result<(f64, f64)> {
    let cov = assemble(params);
    let vx = quad_inv(&cov.sigma_x(), &cov.sigma_x_xi(), "sigma_x")?;
    let vy = quad_inv(&cov.sigma_y(), &cov.sigma_y_eta(), "sigma_y")?;
    Ok((vx, vy))
}

/// `(H_ξ, H_η)` with `H_ξ = Σ_ξX Σ_{X|ξ}⁻¹ Σ_Xξ` and `H_η = Σ_ηY Σ_{Y|η}⁻¹ Σ_Yη`.
pub fn signal_strengths(params: &PathParams) -> Result<(f64, f64)> {
    let sxxi = &params.beta_x_xi * params.var_xi;
    let syeta = &params.beta_y_eta * params.var_eta;
    let hx = quad_inv(&params.sigma_x_given_xi, &sxxi, "sigma_x_given_xi")?;
    let hy = quad_inv(&params.sigma_y_given_eta, &syeta, "sigma_y_given_eta")?;
    Ok((hx, hy))
}

/// Attenuation factor `[H_ξ/(1+H_ξ) · H_η/(1+H_η)]^{1/2}` relating
/// cor(ξ, η) to cor{E(ξ|X), E(η|Y)} under marginal constraints.
pub fn bias_factor(params: &PathParams) -> Result<f64> {
    if params.constraint_mode != ConstraintMode::Marginal {
        return Err(Error::RequiresMarginal);
    }
    params.validate()?;
    let (hx, hy) = signal_strengths(params)?;
    Ok((hx / (1.0 + hx) * hy / (1.0 + hy)).sqrt())
}

/// Construct variance implied by `H` under regression constraints: `H/(H − 1)`.
pub fn sigma2_from_h(h: f64) -> Result<f64> {
    if !(h > 1.0) || !h.is_finite() {
        return Err(Error::HOutOfDomain(h));
    }
    Ok(h / (h - 1.0))
}

/// Rescales ξ and η so that `params` satisfies the `target` constraints.
/// The (X, Y) distribution and cor(ξ, η) are unchanged.
pub fn convert_constraints(params: &PathParams, target: ConstraintMode) -> Result<PathParams> {
    params.validate()?;
    if params.constraint_mode == target {
        return Ok(params.clone());
    }
    // ξ' = c_ξ ξ gives β' = β / c_ξ, var' = c_ξ² var, cov' = c_ξ c_η cov.
    let (c_xi, c_eta) = match target {
        ConstraintMode::Marginal => (1.0 / params.var_xi.sqrt(), 1.0 / params.var_eta.sqrt()),
        ConstraintMode::Regression => {
            let (vx, vy) = population_reg_variances(params)?;
            let floor = linalg::EIG_FLOOR;
            if vx <= floor * params.var_xi || vy <= floor * params.var_eta {
                return Err(Error::DegenerateSignal);
            }
            (1.0 / vx.sqrt(), 1.0 / vy.sqrt())
        }
    };
    let mut out = params.clone();
    out.beta_x_xi = &params.beta_x_xi / c_xi;
    out.beta_y_eta = &params.beta_y_eta / c_eta;
    out.var_xi = params.var_xi * c_xi * c_xi;
    out.var_eta = params.var_eta * c_eta * c_eta;
    out.cov_xi_eta = params.cov_xi_eta * c_xi * c_eta;
    if target == ConstraintMode::Marginal {
        out.var_xi = 1.0;
        out.var_eta = 1.0;
    }
    out.constraint_mode = target;
    Ok(out)
}

/// Off-diagonal entries of the error covariances that are known to be zero.
/// Pairs are zero-based `(i, j)` positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownZeros {
    pub x: Vec<(usize, usize)>,
    pub y: Vec<(usize, usize)>,
}

impl KnownZeros {
    /// Declares every off-diagonal entry zero (diagonal error covariances).
    pub fn diagonal(p: usize, r: usize) -> Self {
        let pairs = |n: usize| {
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect::<Vec<_>>()
        };
        Self { x: pairs(p), y: pairs(r) }
    }

    /// Declares the off-diagonal entries that are exactly zero in `params`.
    pub fn from_params(params: &PathParams) -> Self {
        let zeros = |m: &DMatrix<f64>| {
            let n = m.nrows();
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| m[(i, j)] == 0.0)
                .collect::<Vec<_>>()
        };
        Self {
            x: zeros(&params.sigma_x_given_xi),
            y: zeros(&params.sigma_y_given_eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideIdentification {
    /// Whether the construct variance (and hence the error covariance) is identified.
    pub identified: bool,
    /// A declared zero `(i, j)` whose loadings are both nonzero.
    pub witness: Option<(usize, usize)>,
    /// Declared pairs that were not usable off-diagonal positions.
    pub ignored: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifiabilityReport {
    pub x: SideIdentification,
    pub y: SideIdentification,
}

impl IdentifiabilityReport {
    /// cor(ξ, η) is identified when both construct variances are.
    pub fn cor_identified(&self) -> bool {
        self.x.identified && self.y.identified
    }
}

fn side_identification(loadings: &DVector<f64>, zeros: &[(usize, usize)]) -> SideIdentification {
    let n = loadings.len();
    let tol = 1e-12 * loadings.amax();
    let nonzero = |k: usize| loadings[k].abs() > tol;
    let mut witness = None;
    let mut ignored = Vec::new();
    for &(i, j) in zeros {
        if i == j || i >= n || j >= n {
            ignored.push((i, j));
            continue;
        }
        if witness.is_none() && nonzero(i) && nonzero(j) {
            witness = Some((i.min(j), i.max(j)));
        }
    }
    SideIdentification {
        identified: witness.is_some(),
        witness,
        ignored,
    }
}

/// Identification of σ²_ξ and σ²_η given off-diagonal error covariances
/// known to be zero: a side is identified when some known zero `(i, j)`
/// pairs two nonzero loadings.
pub fn check_identifiability(params: &PathParams, known_zeros: &KnownZeros) -> IdentifiabilityReport {
    IdentifiabilityReport {
        x: side_identification(&params.beta_x_xi, &known_zeros.x),
        y: side_identification(&params.beta_y_eta, &known_zeros.y),
    }
}
