//! Composite-based estimators of |cor{E(ξ|X), E(η|Y)}|.
//!
//! Each method produces semi-orthogonal weight matrices `phi` (p × u_x) and
//! `gamma` (r × u_y). The composites `phiᵀX` and `gammaᵀY` are then passed
//! to the rank-1 canonical-correlation estimator. Only the spans of the
//! weights matter: any orthogonal rotation of either basis gives the same
//! estimate.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{compute_moments, Dataset, SampleMoments};
use crate::optim::{self, BfgsOptions};
use crate::rrr::estimate_cor_regression;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMethod {
    /// Moment-based PLS.
    Simpls,
    /// Likelihood-based envelope bases, started from SIMPLS.
    EnvelopeMle,
    /// Leading principal component of each block.
    Pca,
    /// Unit-weighted sums.
    Unit,
}

/// Convergence record for one envelope basis fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFitTrace {
    pub converged: bool,
    pub iterations: usize,
    /// Objective at the start and after each accepted step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    /// r × u_y, orthonormal columns.
    pub gamma: DMatrix<f64>,
    /// p × u_x, orthonormal columns.
    pub phi: DMatrix<f64>,
    pub u_y: usize,
    pub u_x: usize,
    pub method: WeightMethod,
    pub trace_x: Option<BasisFitTrace>,
    pub trace_y: Option<BasisFitTrace>,
}

impl CompositeWeights {
    pub fn converged(&self) -> bool {
        self.trace_x.as_ref().map_or(true, |t| t.converged) && self.trace_y.as_ref().map_or(true, |t| t.converged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-9,
        }
    }
}

fn check_dims(u_x: usize, u_y: usize, p: usize, r: usize) -> Result<()> {
    if u_x > p || u_y > r {
        return Err(Error::Dimension(alloc::format!(
            "envelope dimensions ({u_x}, {u_y}) exceed (p, r) = ({p}, {r})"
        )));
    }
    Ok(())
}

/// SIMPLS weight directions for the regression whose cross-covariance with
/// the other block is `cross` (n × k), with `s` the covariance of this block.
/// Returns `u` orthonormal columns.
pub fn simpls_directions(cross: &DMatrix<f64>, s: &DMatrix<f64>, u: usize) -> DMatrix<f64> {
    let n = cross.nrows();
    if u == 0 {
        return DMatrix::zeros(n, 0);
    }
    if u >= n {
        return DMatrix::identity(n, n);
    }
    let mut deflated = cross.clone();
    let scale = cross.amax();
    let mut loadings: Vec<DVector<f64>> = Vec::new();
    let mut weights: Vec<DVector<f64>> = Vec::new();
    for _ in 0..u {
        if deflated.amax() <= 1e-12 * scale || scale == 0.0 {
            break;
        }
        let w = linalg::leading_singular(&deflated).u;
        let mut v = s * &w;
        for _ in 0..2 {
            for q in &loadings {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-12 {
            break;
        }
        v /= norm;
        deflated -= &v * (v.transpose() * &deflated);
        loadings.push(v);
        weights.push(w);
    }
    let q = if weights.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        linalg::orthonormal_columns(&DMatrix::from_columns(&weights))
    };
    let mut out = linalg::complete_basis(&q, u);
    for mut col in out.column_iter_mut() {
        let mut c = col.clone_owned();
        if linalg::normalize_sign(&mut c) {
            col.copy_from(&c);
        }
    }
    out
}

/// Moment-based PLS bases: `phi` from the regression of Y on X, `gamma`
/// from the regression of X on Y.
pub fn simpls_weights(m: &SampleMoments, u_x: usize, u_y: usize) -> Result<CompositeWeights> {
    let (p, r) = (m.p(), m.r());
    check_dims(u_x, u_y, p, r)?;
    Ok(CompositeWeights {
        phi: simpls_directions(&m.s_xy(), &m.s_x, u_x),
        gamma: simpls_directions(&m.s_yx, &m.s_y, u_y),
        u_x,
        u_y,
        method: WeightMethod::Simpls,
        trace_x: None,
        trace_y: None,
    })
}

/// `log det(GᵀMG) + log det(GᵀS⁻¹G)` for orthonormal `g`.
pub fn envelope_objective(g: &DMatrix<f64>, resid: &DMatrix<f64>, marginal_inv: &DMatrix<f64>) -> Result<f64> {
    let a = linalg::log_det_pd(&(g.transpose() * resid * g), "GᵀMG")?;
    let b = linalg::log_det_pd(&(g.transpose() * marginal_inv * g), "GᵀS⁻¹G")?;
    Ok(a + b)
}

// Rows of `g` picked by pivoted Gram–Schmidt; the u × u block they form is
// well conditioned.
fn pivot_rows(g: &DMatrix<f64>) -> Vec<usize> {
    let (n, u) = g.shape();
    let mut rows: Vec<DVector<f64>> = (0..n).map(|i| g.row(i).transpose()).collect();
    let mut chosen = Vec::with_capacity(u);
    for _ in 0..u {
        let best = (0..n)
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| rows[a].norm().partial_cmp(&rows[b].norm()).unwrap_or(core::cmp::Ordering::Equal))
            .expect("u < n");
        chosen.push(best);
        let q = &rows[best] / rows[best].norm().max(f64::MIN_POSITIVE);
        for row in rows.iter_mut() {
            let c = q.dot(row);
            row.axpy(-c, &q, 1.0);
        }
    }
    chosen
}

struct Chart {
    pivots: Vec<usize>,
    free: Vec<usize>,
}

impl Chart {
    fn new(g: &DMatrix<f64>) -> (Self, Vec<f64>) {
        let n = g.nrows();
        let pivots = pivot_rows(g);
        let free: Vec<usize> = (0..n).filter(|i| !pivots.contains(i)).collect();
        let top = DMatrix::from_fn(pivots.len(), g.ncols(), |i, j| g[(pivots[i], j)]);
        let c = g * top.try_inverse().expect("pivot block is nonsingular");
        let a: Vec<f64> = free
            .iter()
            .flat_map(|&i| (0..g.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| c[(i, j)])
            .collect();
        (Self { pivots, free }, a)
    }

    fn embed(&self, a: &[f64], u: usize) -> DMatrix<f64> {
        let n = self.pivots.len() + self.free.len();
        let mut c = DMatrix::zeros(n, u);
        for (k, &i) in self.pivots.iter().enumerate() {
            c[(i, k)] = 1.0;
        }
        for (k, &i) in self.free.iter().enumerate() {
            for j in 0..u {
                c[(i, j)] = a[k * u + j];
            }
        }
        c
    }
}

// Objective on a non-orthonormal representative C of span(G):
// log|CᵀMC| + log|CᵀS⁻¹C| − 2 log|CᵀC|, with its gradient in C.
fn chart_objective(c: &DMatrix<f64>, resid: &DMatrix<f64>, sinv: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let mc = resid * c;
    let sc = sinv * c;
    let a = (c.transpose() * &mc).cholesky()?;
    let b = (c.transpose() * &sc).cholesky()?;
    let gram = (c.transpose() * c).cholesky()?;
    let ld = |ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = ld(&a) + ld(&b) - 2.0 * ld(&gram);
    let grad = &mc * a.inverse() * 2.0 + &sc * b.inverse() * 2.0 - c * gram.inverse() * 4.0;
    Some((value, grad))
}

/// Minimizes the envelope objective over u-dimensional subspaces starting
/// from `start` (orthonormal columns).
pub fn fit_envelope_basis(
    start: &DMatrix<f64>,
    resid: &DMatrix<f64>,
    marginal: &DMatrix<f64>,
    opts: &EnvelopeOptions,
) -> Result<(DMatrix<f64>, BasisFitTrace)> {
    let (n, u) = start.shape();
    let sinv = linalg::inv_pd(marginal, "marginal covariance")?;
    linalg::check_pd(resid, "residual covariance")?;
    if u == 0 || u >= n {
        let basis = if u == 0 { DMatrix::zeros(n, 0) } else { DMatrix::identity(n, n) };
        let trace = BasisFitTrace {
            converged: true,
            iterations: 0,
            history: alloc::vec![envelope_objective(&basis, resid, &sinv)?],
        };
        return Ok((basis, trace));
    }

    let mut g = start.clone();
    let mut history = alloc::vec![envelope_objective(&g, resid, &sinv)?];
    let mut iterations = 0;
    let mut converged = false;
    for _round in 0..5 {
        let (chart, a0) = Chart::new(&g);
        let free = chart.free.clone();
        let run = optim::minimize(
            |a| {
                let c = chart.embed(a, u);
                let (v, grad_c) = chart_objective(&c, resid, &sinv)?;
                let grad: Vec<f64> = free
                    .iter()
                    .flat_map(|&i| (0..u).map(move |j| (i, j)))
                    .map(|(i, j)| grad_c[(i, j)])
                    .collect();
                Some((v, grad))
            },
            &a0,
            &BfgsOptions {
                max_iter: opts.max_iter.saturating_sub(iterations).max(1),
                grad_tol: opts.grad_tol,
            },
        );
        let Some(run) = run else { break };
        g = linalg::orthonormal_columns(&chart.embed(&run.x, u));
        iterations += run.iterations;
        // Chart values coincide with the orthonormal objective; skip the repeated start value.
        history.extend(run.history.iter().skip(1));
        if run.converged {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter || run.iterations == 0 {
            break;
        }
    }
    for mut col in g.column_iter_mut() {
        let mut c = col.clone_owned();
        if linalg::normalize_sign(&mut c) {
            col.copy_from(&c);
        }
    }
    Ok((
        g,
        BasisFitTrace {
            converged,
            iterations,
            history,
        },
    ))
}

/// Residual covariances `(S_{X|Y}, S_{Y|X})`.
pub fn residual_covariances(m: &SampleMoments) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sx_inv = linalg::inv_pd(&m.s_x, "s_x")?;
    let sy_inv = linalg::inv_pd(&m.s_y, "s_y")?;
    let rx = linalg::symmetrize(&(&m.s_x - m.s_xy() * &sy_inv * &m.s_yx));
    let ry = linalg::symmetrize(&(&m.s_y - &m.s_yx * &sx_inv * m.s_xy()));
    Ok((rx, ry))
}

/// Likelihood-based envelope bases for both blocks, started from SIMPLS.
pub fn envelope_weights_mle(m: &SampleMoments, u_x: usize, u_y: usize, opts: &EnvelopeOptions) -> Result<CompositeWeights> {
    let (p, r) = (m.p(), m.r());
    check_dims(u_x, u_y, p, r)?;
    let (rx, ry) = residual_covariances(m)?;
    let start = simpls_weights(m, u_x, u_y)?;
    let (phi, trace_x) = fit_envelope_basis(&start.phi, &rx, &m.s_x, opts)?;
    let (gamma, trace_y) = fit_envelope_basis(&start.gamma, &ry, &m.s_y, opts)?;
    Ok(CompositeWeights {
        gamma,
        phi,
        u_y,
        u_x,
        method: WeightMethod::EnvelopeMle,
        trace_x: Some(trace_x),
        trace_y: Some(trace_y),
    })
}

fn leading_eigenvector(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, vectors) = linalg::sym_eigen_desc(s);
    let mut v = vectors.column(0).into_owned();
    linalg::normalize_sign(&mut v);
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// First principal component of each block.
pub fn pca_weights(m: &SampleMoments) -> CompositeWeights {
    CompositeWeights {
        gamma: leading_eigenvector(&m.s_y),
        phi: leading_eigenvector(&m.s_x),
        u_y: 1,
        u_x: 1,
        method: WeightMethod::Pca,
        trace_x: None,
        trace_y: None,
    }
}

/// Normalized unit weights `1/√r` and `1/√p`.
pub fn unit_weights(p: usize, r: usize) -> CompositeWeights {
    CompositeWeights {
        gamma: DMatrix::from_element(r, 1, 1.0 / (r as f64).sqrt()),
        phi: DMatrix::from_element(p, 1, 1.0 / (p as f64).sqrt()),
        u_y: 1,
        u_x: 1,
        method: WeightMethod::Unit,
        trace_x: None,
        trace_y: None,
    }
}

/// Weights for `method`; PCA and unit weights ignore the requested dimensions.
pub fn composite_weights(m: &SampleMoments, u_x: usize, u_y: usize, method: WeightMethod, opts: &EnvelopeOptions) -> Result<CompositeWeights> {
    match method {
        WeightMethod::Simpls => simpls_weights(m, u_x, u_y),
        WeightMethod::EnvelopeMle => envelope_weights_mle(m, u_x, u_y, opts),
        WeightMethod::Pca => Ok(pca_weights(m)),
        WeightMethod::Unit => Ok(unit_weights(m.p(), m.r())),
    }
}

/// First canonical correlation of the composites; zero when either basis is empty.
pub fn composite_estimate(m: &SampleMoments, w: &CompositeWeights) -> Result<f64> {
    if w.phi.ncols() == 0 || w.gamma.ncols() == 0 {
        return Ok(0.0);
    }
    estimate_cor_regression(&m.project(&w.phi, &w.gamma))
}

/// Result of a composite-based fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFit {
    pub estimate: f64,
    pub weights: CompositeWeights,
    /// Set when either dimension is zero and the estimate is zero by construction.
    pub degenerate: bool,
}

/// Envelope composites followed by the rank-1 canonical-correlation estimator.
pub fn serr_estimate(data: &Dataset, u_x: usize, u_y: usize, method: WeightMethod, opts: &EnvelopeOptions) -> Result<CompositeFit> {
    let m = compute_moments(data)?;
    serr_from_moments(&m, u_x, u_y, method, opts)
}

pub fn serr_from_moments(m: &SampleMoments, u_x: usize, u_y: usize, method: WeightMethod, opts: &EnvelopeOptions) -> Result<CompositeFit> {
    let weights = composite_weights(m, u_x, u_y, method, opts)?;
    let degenerate = weights.phi.ncols() == 0 || weights.gamma.ncols() == 0;
    let estimate = composite_estimate(m, &weights)?;
    Ok(CompositeFit {
        estimate,
        weights,
        degenerate,
    })
}

/// One cell of the dimension-selection grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionScore {
    pub u_x: usize,
    pub u_y: usize,
    /// `-2 log L / n` up to an additive constant.
    pub deviance_per_obs: f64,
    pub cross_params: usize,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionSelection {
    pub u_x: usize,
    pub u_y: usize,
    /// All (p + 1)(r + 1) cells, u_x-major.
    pub scores: Vec<DimensionScore>,
}

// -2 log L / n of the envelope-reduced normal model with rank-1 cross
// covariance, up to constants, given bases for both blocks.
fn envelope_deviance(m: &SampleMoments, phi: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<f64> {
    let block = |s: &DMatrix<f64>, basis: &DMatrix<f64>, name: &'static str| -> Result<f64> {
        let comp = linalg::orthogonal_complement(basis);
        let a = linalg::log_det_pd(&(basis.transpose() * s * basis), name)?;
        let b = linalg::log_det_pd(&(comp.transpose() * s * &comp), name)?;
        Ok(a + b)
    };
    let mut dev = block(&m.s_x, phi, "s_x")? + block(&m.s_y, gamma, "s_y")?;
    if phi.ncols() > 0 && gamma.ncols() > 0 {
        let d1 = estimate_cor_regression(&m.project(phi, gamma))?;
        dev += (1.0 - d1 * d1).max(1e-300).ln();
    }
    Ok(dev)
}

/// Chooses `(u_x, u_y)` by BIC over the full grid {0..p} × {0..r}.
///
/// Σ_X and Σ_Y contribute p(p+1)/2 and r(r+1)/2 parameters at every
/// dimension, so cells differ only through the fit and the rank-1 cross
/// covariance, which has `u_x + u_y − 1` free parameters (none when either
/// dimension is zero). Ties go to the smaller total dimension.
pub fn select_dimensions(data: &Dataset, method: WeightMethod, opts: &EnvelopeOptions) -> Result<DimensionSelection> {
    let m = compute_moments(data)?;
    select_dimensions_from_moments(&m, method, opts)
}

pub fn select_dimensions_from_moments(m: &SampleMoments, method: WeightMethod, opts: &EnvelopeOptions) -> Result<DimensionSelection> {
    let (p, r, n) = (m.p(), m.r(), m.n);
    if n <= p + r {
        return Err(Error::InsufficientData { needed: p + r + 1, got: n });
    }
    if matches!(method, WeightMethod::Pca | WeightMethod::Unit) {
        return Err(Error::InvalidParams("dimension selection needs SIMPLS or envelope MLE bases".into()));
    }
    let phis: Vec<DMatrix<f64>> = (0..=p)
        .map(|u| composite_weights(m, u, 0, method, opts).map(|w| w.phi))
        .collect::<Result<_>>()?;
    let gammas: Vec<DMatrix<f64>> = (0..=r)
        .map(|u| composite_weights(m, 0, u, method, opts).map(|w| w.gamma))
        .collect::<Result<_>>()?;
    let log_n = (n as f64).ln();
    let mut scores = Vec::with_capacity((p + 1) * (r + 1));
    for (u_x, phi) in phis.iter().enumerate() {
        for (u_y, gamma) in gammas.iter().enumerate() {
            let dev = envelope_deviance(m, phi, gamma)?;
            let k = if u_x > 0 && u_y > 0 { u_x + u_y - 1 } else { 0 };
            scores.push(DimensionScore {
                u_x,
                u_y,
                deviance_per_obs: dev,
                cross_params: k,
                bic: n as f64 * dev + k as f64 * log_n,
            });
        }
    }
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.bic
                .partial_cmp(&b.bic)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then((a.u_x + a.u_y).cmp(&(b.u_x + b.u_y)))
                .then(a.u_x.cmp(&b.u_x))
        })
        .copied()
        .expect("grid is non-empty");
    Ok(DimensionSelection {
        u_x: best.u_x,
        u_y: best.u_y,
        scores,
    })
}
