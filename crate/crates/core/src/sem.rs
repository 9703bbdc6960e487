//! Maximum-likelihood SEM with diagonal error covariances.
//!
//! The implied covariance of (X, Y) under marginal constraints is
//!
//! ```text
//! [ D_X + λ_X λ_Xᵀ     ρ λ_X λ_Yᵀ   ]
//! [ ρ λ_Y λ_Xᵀ        D_Y + λ_Y λ_Yᵀ ]
//! ```
//!
//! and the fit minimizes `F(θ) = log det Σ(θ) + tr(S Σ(θ)⁻¹)`. Two
//! coordinate systems are available: the marginal one
//! `θ = (λ_X, λ_Y, log d_X, log d_Y, atanh ρ)` and a regression-constraint
//! one in which each loading vector is a free direction `v` rescaled so that
//! `H = vᵀD⁻¹v·s² = 1 + e^τ`, i.e. σ² = H/(H − 1). Both describe the same
//! covariance family and reach the same optimum.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::SampleMoments;
use crate::optim::{self, BfgsOptions};

/// Uniquenesses below this value are reported as Heywood cases.
pub const HEYWOOD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemParameterization {
    Marginal,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub starts: usize,
    /// Seed for the start perturbations.
    pub seed: u64,
    pub parameterization: SemParameterization,
}

impl Default for SemOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-7,
            starts: 5,
            seed: 0,
            parameterization: SemParameterization::Marginal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemFit {
    pub lambda_x: DVector<f64>,
    pub lambda_y: DVector<f64>,
    pub d_x: DVector<f64>,
    pub d_y: DVector<f64>,
    /// Estimate of cor(ξ, η).
    pub rho: f64,
    /// Minimized discrepancy `log det Σ + tr(SΣ⁻¹)`.
    pub objective: f64,
    /// `n/2 · (objective + (p + r) log 2π)`.
    pub neg_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_inf: f64,
    /// Index of the winning start (0 is the principal-component start).
    pub best_start: usize,
    /// Indices into (d_x, d_y) concatenated whose uniqueness fell below [`HEYWOOD_FLOOR`].
    pub heywood: Vec<usize>,
    /// Objective after every accepted iteration of the winning start.
    pub history: Vec<f64>,
}

struct Unpacked {
    lx: DVector<f64>,
    ly: DVector<f64>,
    dx: DVector<f64>,
    dy: DVector<f64>,
    rho: f64,
}

/// Implied covariance of (X, Y) for the given structural parameters.
pub fn structured_cov(lx: &DVector<f64>, ly: &DVector<f64>, dx: &DVector<f64>, dy: &DVector<f64>, rho: f64) -> DMatrix<f64> {
    let (p, r) = (lx.len(), ly.len());
    let mut s = DMatrix::zeros(p + r, p + r);
    let sxx = DMatrix::from_diagonal(dx) + lx * lx.transpose();
    let syy = DMatrix::from_diagonal(dy) + ly * ly.transpose();
    let syx = ly * lx.transpose() * rho;
    s.view_mut((0, 0), (p, p)).copy_from(&sxx);
    s.view_mut((p, p), (r, r)).copy_from(&syy);
    s.view_mut((p, 0), (r, p)).copy_from(&syx);
    s.view_mut((0, p), (p, r)).copy_from(&syx.transpose());
    s
}

pub fn sem_structured_cov(fit: &SemFit) -> DMatrix<f64> {
    structured_cov(&fit.lambda_x, &fit.lambda_y, &fit.d_x, &fit.d_y, fit.rho)
}

fn unpack(theta: &[f64], p: usize, r: usize, param: SemParameterization) -> Unpacked {
    match param {
        SemParameterization::Marginal => {
            let lx = DVector::from_column_slice(&theta[0..p]);
            let ly = DVector::from_column_slice(&theta[p..p + r]);
            let dx = DVector::from_iterator(p, theta[p + r..2 * p + r].iter().map(|v| v.exp()));
            let dy = DVector::from_iterator(r, theta[2 * p + r..2 * p + 2 * r].iter().map(|v| v.exp()));
            let rho = theta[2 * p + 2 * r].tanh();
            Unpacked { lx, ly, dx, dy, rho }
        }
        SemParameterization::Regression => {
            let vx = DVector::from_column_slice(&theta[0..p]);
            let vy = DVector::from_column_slice(&theta[p..p + r]);
            let dx = DVector::from_iterator(p, theta[p + r..2 * p + r].iter().map(|v| v.exp()));
            let dy = DVector::from_iterator(r, theta[2 * p + r..2 * p + 2 * r].iter().map(|v| v.exp()));
            let k = 2 * p + 2 * r;
            let (tx, ty) = (theta[k], theta[k + 1]);
            let rho = theta[k + 2].tanh();
            let lx = &vx * regression_scale(&vx, &dx, tx);
            let ly = &vy * regression_scale(&vy, &dy, ty);
            Unpacked { lx, ly, dx, dy, rho }
        }
    }
}

fn quad_diag_inv(v: &DVector<f64>, d: &DVector<f64>) -> f64 {
    v.iter().zip(d.iter()).map(|(a, b)| a * a / b).sum()
}

// λ = v·s with s = e^{τ/2}/√(vᵀD⁻¹v), so that λᵀD⁻¹λ = e^τ = H − 1.
fn regression_scale(v: &DVector<f64>, d: &DVector<f64>, tau: f64) -> f64 {
    (tau.exp() / quad_diag_inv(v, d)).sqrt()
}

/// Number of free coordinates for a given parameterization.
pub fn theta_len(p: usize, r: usize, param: SemParameterization) -> usize {
    match param {
        SemParameterization::Marginal => 2 * p + 2 * r + 1,
        SemParameterization::Regression => 2 * p + 2 * r + 3,
    }
}

/// Coordinates representing `(λ_X, λ_Y, d_X, d_Y, ρ)` in the chosen parameterization.
pub fn pack(
    lx: &DVector<f64>,
    ly: &DVector<f64>,
    dx: &DVector<f64>,
    dy: &DVector<f64>,
    rho: f64,
    param: SemParameterization,
) -> Vec<f64> {
    let mut theta: Vec<f64> = Vec::with_capacity(theta_len(lx.len(), ly.len(), param));
    theta.extend(lx.iter());
    theta.extend(ly.iter());
    theta.extend(dx.iter().map(|v| v.ln()));
    theta.extend(dy.iter().map(|v| v.ln()));
    if param == SemParameterization::Regression {
        theta.push(quad_diag_inv(lx, dx).ln());
        theta.push(quad_diag_inv(ly, dy).ln());
    }
    theta.push(rho.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh());
    theta
}

/// Discrepancy `log det Σ(θ) + tr(SΣ(θ)⁻¹)` and its gradient with respect
/// to θ. Returns `None` where Σ(θ) is not numerically PD.
pub fn sem_objective(s: &DMatrix<f64>, p: usize, r: usize, theta: &[f64], param: SemParameterization) -> Option<(f64, Vec<f64>)> {
    let u = unpack(theta, p, r, param);
    let sigma = structured_cov(&u.lx, &u.ly, &u.dx, &u.dy, u.rho);
    let chol = sigma.cholesky()?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let inv_s = &inv * s;
    let value = log_det + inv_s.trace();
    if !value.is_finite() {
        return None;
    }
    // dF = tr(G dΣ) with G = Σ⁻¹ − Σ⁻¹ S Σ⁻¹.
    let g = &inv - &inv_s * &inv;
    let m = p + r;
    let mut lam = DMatrix::zeros(m, 2);
    lam.view_mut((0, 0), (p, 1)).copy_from(&u.lx);
    lam.view_mut((p, 1), (r, 1)).copy_from(&u.ly);
    let phi = DMatrix::from_row_slice(2, 2, &[1.0, u.rho, u.rho, 1.0]);
    let g_lam = &g * &lam;
    let d_lam = &g_lam * &phi * 2.0;
    let d_rho = 2.0 * (lam.transpose() * &g_lam)[(0, 1)];
    let grad_lx = DVector::from_iterator(p, (0..p).map(|i| d_lam[(i, 0)]));
    let grad_ly = DVector::from_iterator(r, (0..r).map(|j| d_lam[(p + j, 1)]));
    let mut grad_ldx: Vec<f64> = (0..p).map(|i| g[(i, i)] * u.dx[i]).collect();
    let mut grad_ldy: Vec<f64> = (0..r).map(|j| g[(p + j, p + j)] * u.dy[j]).collect();
    let grad_z = d_rho * (1.0 - u.rho * u.rho);

    let mut grad = Vec::with_capacity(theta.len());
    match param {
        SemParameterization::Marginal => {
            grad.extend(grad_lx.iter());
            grad.extend(grad_ly.iter());
            grad.extend(grad_ldx);
            grad.extend(grad_ldy);
        }
        SemParameterization::Regression => {
            let vx = DVector::from_column_slice(&theta[0..p]);
            let vy = DVector::from_column_slice(&theta[p..p + r]);
            let k = 2 * p + 2 * r;
            let (gvx, gtx) = chain_regression(&vx, &u.dx, theta[k], &grad_lx, &u.lx, &mut grad_ldx);
            let (gvy, gty) = chain_regression(&vy, &u.dy, theta[k + 1], &grad_ly, &u.ly, &mut grad_ldy);
            grad.extend(gvx.iter());
            grad.extend(gvy.iter());
            grad.extend(grad_ldx);
            grad.extend(grad_ldy);
            grad.push(gtx);
            grad.push(gty);
        }
    }
    grad.push(grad_z);
    Some((value, grad))
}

// Pulls ∂F/∂λ back through λ = v·s(v, d, τ). Adds the d-dependence of s to
// `grad_logd` and returns (∂F/∂v, ∂F/∂τ).
fn chain_regression(
    v: &DVector<f64>,
    d: &DVector<f64>,
    tau: f64,
    grad_lambda: &DVector<f64>,
    lambda: &DVector<f64>,
    grad_logd: &mut [f64],
) -> (DVector<f64>, f64) {
    let q = quad_diag_inv(v, d);
    let s = regression_scale(v, d, tau);
    let gv = grad_lambda.dot(v);
    let grad_v = DVector::from_iterator(
        v.len(),
        (0..v.len()).map(|k| s * grad_lambda[k] - s * v[k] / (q * d[k]) * gv),
    );
    for k in 0..v.len() {
        grad_logd[k] += gv * 0.5 * s * v[k] * v[k] / (q * d[k]);
    }
    let grad_tau = 0.5 * grad_lambda.dot(lambda);
    (grad_v, grad_tau)
}

fn one_factor_start(s: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = s.nrows();
    let (values, vectors) = linalg::sym_eigen_desc(s);
    let rest = if n > 1 {
        values.iter().skip(1).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let top = values[0];
    let scale = (top - rest).max(0.1 * top).sqrt();
    let mut lambda = vectors.column(0) * scale;
    linalg::normalize_sign(&mut lambda);
    let d = DVector::from_iterator(n, (0..n).map(|i| (s[(i, i)] - lambda[i] * lambda[i]).max(0.05 * s[(i, i)])));
    (lambda, d)
}

/// Fits the diagonal-error SEM to sample moments.
pub fn fit_sem(m: &SampleMoments, opts: &SemOptions) -> Result<SemFit> {
    let (p, r) = (m.p(), m.r());
    if p < 2 || r < 2 {
        return Err(Error::NotIdentified(alloc::format!(
            "diagonal-error SEM needs at least two indicators per construct, got p = {p}, r = {r}"
        )));
    }
    linalg::check_pd(&m.s_x, "s_x")?;
    linalg::check_pd(&m.s_y, "s_y")?;
    let s = m.joint();
    linalg::check_pd(&s, "sample covariance")?;

    let (lx, dx) = one_factor_start(&m.s_x);
    let (ly, dy) = one_factor_start(&m.s_y);
    let rho0 = (lx.dot(&(&m.s_xy() * &ly)) / (lx.norm_squared() * ly.norm_squared())).clamp(-0.9, 0.9);
    let base = pack(&lx, &ly, &dx, &dy, rho0, opts.parameterization);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bfgs = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
    };
    let mut best: Option<(usize, optim::Minimum)> = None;
    for start in 0..opts.starts.max(1) {
        let theta0: Vec<f64> = if start == 0 {
            base.clone()
        } else {
            base.iter()
                .map(|&t| {
                    let z: f64 = rng.sample(StandardNormal);
                    t + 0.3 * z * (t.abs() + 0.5)
                })
                .collect()
        };
        let run = optim::minimize(
            |theta| sem_objective(&s, p, r, theta, opts.parameterization),
            &theta0,
            &bfgs,
        );
        let Some(run) = run else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => run.value < b.value,
        };
        if better {
            best = Some((start, run));
        }
    }
    let Some((best_start, run)) = best else {
        // Every start evaluated outside the PD region; report the base start unconverged.
        let u = unpack(&base, p, r, opts.parameterization);
        return Ok(finish(u, f64::INFINITY, m.n, false, 0, f64::INFINITY, 0, Vec::new()));
    };
    let u = unpack(&run.x, p, r, opts.parameterization);
    Ok(finish(
        u,
        run.value,
        m.n,
        run.converged,
        run.iterations,
        run.grad_inf,
        best_start,
        run.history,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mut u: Unpacked,
    objective: f64,
    n: usize,
    converged: bool,
    iterations: usize,
    grad_inf: f64,
    best_start: usize,
    history: Vec<f64>,
) -> SemFit {
    if linalg::normalize_sign(&mut u.lx) {
        u.rho = -u.rho;
    }
    if linalg::normalize_sign(&mut u.ly) {
        u.rho = -u.rho;
    }
    let heywood = u
        .dx
        .iter()
        .chain(u.dy.iter())
        .enumerate()
        .filter(|(_, &d)| d < HEYWOOD_FLOOR)
        .map(|(i, _)| i)
        .collect();
    let m = (u.lx.len() + u.ly.len()) as f64;
    SemFit {
        neg_loglik: 0.5 * n as f64 * (objective + m * (2.0 * core::f64::consts::PI).ln()),
        lambda_x: u.lx,
        lambda_y: u.ly,
        d_x: u.dx,
        d_y: u.dy,
        rho: u.rho,
        objective,
        converged,
        iterations,
        grad_inf,
        best_start,
        heywood,
        history,
    }
}

/// Regression-scale correlation implied by a fit: the fitted attenuation
/// factor times |ρ|.
pub fn sem_implied_reg_correlation(fit: &SemFit) -> Result<f64> {
    let hx = quad_diag_inv(&fit.lambda_x, &fit.d_x);
    let hy = quad_diag_inv(&fit.lambda_y, &fit.d_y);
    if !(hx > 0.0 && hy > 0.0) || !hx.is_finite() || !hy.is_finite() {
        return Err(Error::DegenerateSignal);
    }
    let factor = (hx / (1.0 + hx) * hy / (1.0 + hy)).sqrt();
    Ok(factor * fit.rho.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bias_factor, joint_covariance, PathParams};
    use alloc::vec;
    use approx::assert_relative_eq;

    fn l() -> DVector<f64> {
        DVector::from_vec(vec![4.0 / 3.0, 0.98, 0.75])
    }

    fn moments_of(s: DMatrix<f64>, p: usize) -> SampleMoments {
        let r = s.nrows() - p;
        SampleMoments::from_population(
            s.view((0, 0), (p, p)).into_owned(),
            s.view((p, p), (r, r)).into_owned(),
            s.view((p, 0), (r, p)).into_owned(),
            1000,
        )
    }

    #[test]
    fn zero_rho_is_block_diagonal() {
        let ones = DVector::from_element(3, 1.0);
        let s = structured_cov(&l(), &l(), &ones, &ones, 0.0);
        assert_eq!(s.view((3, 0), (3, 3)).into_owned(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn matches_joint_covariance_for_diagonal_errors() {
        let dx = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        let dy = DVector::from_vec(vec![1.5, 0.7, 1.1]);
        let ly = DVector::from_vec(vec![0.4, -0.9, 1.2]);
        let params = PathParams::marginal(l(), ly.clone(), DMatrix::from_diagonal(&dx), DMatrix::from_diagonal(&dy), -0.35).unwrap();
        let joint = joint_covariance(&params).unwrap().observed();
        let s = structured_cov(&l(), &ly, &dx, &dy, -0.35);
        assert!((joint - s).amax() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ones = DVector::from_element(3, 1.0);
        let s = structured_cov(&l(), &l(), &ones, &ones, 0.4) + DMatrix::identity(6, 6) * 0.1;
        for param in [SemParameterization::Marginal, SemParameterization::Regression] {
            let theta = pack(
                &DVector::from_vec(vec![1.0, 0.8, 0.6]),
                &DVector::from_vec(vec![0.9, 1.1, 0.5]),
                &DVector::from_vec(vec![1.2, 0.9, 1.1]),
                &DVector::from_vec(vec![0.8, 1.3, 1.0]),
                0.3,
                param,
            );
            let (_, grad) = sem_objective(&s, 3, 3, &theta, param).unwrap();
            for k in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (sem_objective(&s, 3, 3, &tp, param).unwrap().0 - sem_objective(&s, 3, 3, &tm, param).unwrap().0) / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{param:?} k={k} fd={fd} an={}", grad[k]);
            }
        }
    }

    #[test]
    fn recovers_exact_structure() {
        let dx = DVector::from_vec(vec![1.0, 0.6, 1.4]);
        let dy = DVector::from_vec(vec![0.9, 1.2, 0.5]);
        let ly = DVector::from_vec(vec![0.7, 1.1, 0.9]);
        let s = structured_cov(&l(), &ly, &dx, &dy, 0.55);
        let fit = fit_sem(&moments_of(s, 3), &SemOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.rho - 0.55).abs() < 1e-6, "{}", fit.rho);
        assert!((&fit.lambda_x - l()).amax() < 1e-6);
        assert!((&fit.lambda_y - &ly).amax() < 1e-6);
        assert!((&fit.d_x - &dx).amax() < 1e-6);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn implied_regression_correlation() {
        let ones = DVector::from_element(3, 1.0);
        let s = structured_cov(&l(), &l(), &ones, &ones, 0.5);
        let fit = fit_sem(&moments_of(s, 3), &SemOptions::default()).unwrap();
        let params = PathParams::marginal(l(), l(), DMatrix::identity(3, 3), DMatrix::identity(3, 3), 0.5).unwrap();
        let expect = bias_factor(&params).unwrap() * 0.5;
        assert_relative_eq!(sem_implied_reg_correlation(&fit).unwrap(), expect, epsilon = 1e-6);
        assert!(sem_implied_reg_correlation(&fit).unwrap() <= fit.rho.abs());

        let mut zero = fit.clone();
        zero.rho = 0.0;
        assert_eq!(sem_implied_reg_correlation(&zero).unwrap(), 0.0);
        zero.lambda_x = DVector::zeros(3);
        assert_eq!(sem_implied_reg_correlation(&zero), Err(Error::DegenerateSignal));
    }

    #[test]
    fn rejects_single_indicator() {
        let m = SampleMoments::from_population(DMatrix::identity(1, 1), DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 10);
        assert!(matches!(fit_sem(&m, &SemOptions::default()), Err(Error::NotIdentified(_))));
    }
}
