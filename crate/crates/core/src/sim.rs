//! Monte Carlo harness: seeded data generation, replicated estimator runs
//! over a grid of construct correlations, and the published figure settings.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fit::{fit_moments, Dimensions, Estimator, FitSettings};
use crate::linalg;
use crate::model::{bias_factor, joint_covariance, PathParams};
use crate::moments::{compute_moments, Dataset};
use crate::sem::SemOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorStructure {
    /// Σ_{X|ξ} = Σ_{Y|η} = I.
    Identity,
    /// `L(LᵀL)⁻¹Lᵀ + 3L₀L₀ᵀ` with L₀ an orthonormal basis of span(L)^⊥.
    EnvelopeStructured,
}

impl ErrorStructure {
    pub fn covariance(self, loading: &DVector<f64>) -> DMatrix<f64> {
        let k = loading.len();
        match self {
            Self::Identity => DMatrix::identity(k, k),
            Self::EnvelopeStructured => {
                let q = linalg::orthonormal_columns(&DMatrix::from_column_slice(k, 1, loading.as_slice()));
                let q0 = linalg::orthogonal_complement(&q);
                linalg::symmetrize(&(&q * q.transpose() + &q0 * q0.transpose() * 3.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Shared loading vector L for both blocks.
    pub loading: DVector<f64>,
    pub error_structure: ErrorStructure,
    pub rho_grid: Vec<f64>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidParams("reps must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: self.n });
        }
        if self.loading.is_empty() || self.loading.iter().all(|&v| v == 0.0) || self.loading.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("loading vector must be finite and nonzero".into()));
        }
        if let Some(bad) = self.rho_grid.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(Error::InvalidParams(alloc::format!("grid value {bad} is outside (-1, 1)")));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidParams("no estimators requested".into()));
        }
        Ok(())
    }

    /// Generating parameters at construct correlation `rho`, marginal constraints.
    pub fn params(&self, rho: f64) -> Result<PathParams> {
        let e = self.error_structure.covariance(&self.loading);
        PathParams::marginal(self.loading.clone(), self.loading.clone(), e.clone(), e, rho)
    }

    /// Population targets `(cor(ξ, η), bias_factor · cor(ξ, η))`.
    pub fn targets(&self, rho: f64) -> Result<(f64, f64)> {
        Ok((rho, bias_factor(&self.params(rho)?)? * rho))
    }
}

pub const DEFAULT_ESTIMATORS: [Estimator; 4] = [Estimator::Rrr, Estimator::Pls, Estimator::Serr, Estimator::Sem];

/// Draws `n` rows of (X, Y) as `μ + Σ^{1/2} z` with `z` standard normal.
pub fn generate_dataset(params: &PathParams, n: usize, seed: u64) -> Result<Dataset> {
    let cov = joint_covariance(params)?;
    let sigma = cov.observed();
    linalg::check_pd(&sigma, "observed covariance")?;
    let root = linalg::sqrt_psd(&sigma);
    let k = params.p + params.r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut rows = z * root;
    let mu: Vec<f64> = params.mu_x.iter().chain(params.mu_y.iter()).copied().collect();
    for mut row in rows.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mu) {
            *v += m;
        }
    }
    Dataset::new(rows, params.p, params.r)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (rho, replication) cell. Keyed on the bit pattern of `rho`
/// rather than its position, so reordering or subsetting the grid leaves
/// every cell's data unchanged.
pub fn child_seed(master: u64, rho: f64, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ rho.to_bits()) ^ rep as u64)
}

fn settings_for(seed: u64) -> FitSettings {
    FitSettings {
        dims: Dimensions::Fixed { u_x: 1, u_y: 1 },
        sem: SemOptions {
            seed: splitmix64(seed ^ 0x5E11),
            ..SemOptions::default()
        },
        ..FitSettings::default()
    }
}

/// Estimates from one replication, in the order of `config.estimators`.
/// SEM contributes its estimate of cor(ξ, η), every other estimator its
/// regression-scale estimate. Failed or non-converged fits are `None`.
pub fn replicate(config: &SimConfig, rho: f64, rep: usize) -> Result<Vec<Option<f64>>> {
    let params = config.params(rho)?;
    let seed = child_seed(config.seed, rho, rep);
    let data = generate_dataset(&params, config.n, seed)?;
    let Ok(m) = compute_moments(&data) else {
        return Ok(vec![None; config.estimators.len()]);
    };
    let settings = settings_for(seed);
    Ok(config
        .estimators
        .iter()
        .map(|&e| {
            let fit = fit_moments(&m, e, &settings).ok()?;
            match e {
                Estimator::Sem => fit.diagnostics.converged.then_some(fit.cor_xi_eta?),
                _ => Some(fit.estimate_cor_regression),
            }
            .filter(|v| v.is_finite())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub rho: f64,
    pub estimator: Estimator,
    /// `None` when every replication failed.
    pub mean: Option<f64>,
    /// Sample standard deviation (divisor count − 1); zero for a single success.
    pub sd: Option<f64>,
    pub n_fail: usize,
    pub target_marginal: f64,
    pub target_regression: f64,
    /// Per-replication estimates in replication order.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
    pub notes: Vec<String>,
}

impl SimResult {
    pub fn row(&self, rho: f64, estimator: Estimator) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.rho == rho && r.estimator == estimator)
    }

    pub fn rows_for(&self, estimator: Estimator) -> impl Iterator<Item = &SimRow> {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Summarizes replication results for one grid value. `per_rep[i][j]` is the
/// estimate of estimator `j` in replication `i`.
pub fn aggregate(config: &SimConfig, rho: f64, per_rep: &[Vec<Option<f64>>]) -> Result<Vec<SimRow>> {
    let (target_marginal, target_regression) = config.targets(rho)?;
    Ok(config
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &estimator)| {
            let values: Vec<Option<f64>> = per_rep.iter().map(|rep| rep[j]).collect();
            let ok: Vec<f64> = values.iter().flatten().copied().collect();
            let count = ok.len();
            let mean = (count > 0).then(|| pairwise_sum(&ok) / count as f64);
            let sd = mean.map(|mu| {
                if count < 2 {
                    0.0
                } else {
                    let sq: Vec<f64> = ok.iter().map(|v| (v - mu) * (v - mu)).collect();
                    (pairwise_sum(&sq) / (count - 1) as f64).sqrt()
                }
            });
            SimRow {
                rho,
                estimator,
                mean,
                sd,
                n_fail: values.len() - count,
                target_marginal,
                target_regression,
                values,
            }
        })
        .collect())
}

pub fn grid_notes(config: &SimConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if config.estimators.iter().any(|e| matches!(e, Estimator::Pls | Estimator::Serr)) {
        notes.push("pls and serr use u_x = u_y = 1".into());
    }
    if config.estimators.contains(&Estimator::Sem) {
        notes.push("sem rows report the estimate of cor(xi, eta); non-converged fits count as failures".into());
    }
    notes
}

/// Runs every replication sequentially.
pub fn run_grid(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let mut rows = Vec::new();
    for &rho in &config.rho_grid {
        let per_rep: Vec<Vec<Option<f64>>> = (0..config.reps).map(|rep| replicate(config, rho, rep)).collect::<Result<_>>()?;
        rows.extend(aggregate(config, rho, &per_rep)?);
    }
    Ok(SimResult {
        rows,
        notes: grid_notes(config),
    })
}

/// 13 equispaced points from 0.05 to 0.65.
pub fn reproduction_grid() -> Vec<f64> {
    (0..13).map(|i| 0.05 + 0.05 * i as f64).collect()
}

pub const DEFAULT_REPS: usize = 10;

/// Published settings for figures 1 to 4, one configuration per sample size.
pub fn figure_configs(id: u32, seed: u64, reps: usize) -> Result<Vec<SimConfig>> {
    let fig1 = DVector::from_vec(vec![4.0 / 3.0, 0.98, 0.75]);
    let (loading, errors, sizes): (DVector<f64>, ErrorStructure, &[usize]) = match id {
        1 => (fig1, ErrorStructure::Identity, &[100, 1000]),
        2 => (DVector::from_vec(vec![0.58, 0.98, 0.0]), ErrorStructure::Identity, &[100]),
        3 => (fig1, ErrorStructure::EnvelopeStructured, &[100, 1000]),
        4 => (DVector::from_element(3, 4.0), ErrorStructure::Identity, &[100]),
        _ => return Err(Error::InvalidParams(alloc::format!("unknown figure {id}; expected 1, 2, 3 or 4"))),
    };
    Ok(sizes
        .iter()
        .map(|&n| SimConfig {
            loading: loading.clone(),
            error_structure: errors,
            rho_grid: reproduction_grid(),
            n,
            reps,
            seed,
            estimators: DEFAULT_ESTIMATORS.to_vec(),
        })
        .collect())
}

/// Runs all configurations of a figure sequentially.
pub fn reproduce_figure(id: u32, seed: u64, reps: usize) -> Result<Vec<(usize, SimResult)>> {
    figure_configs(id, seed, reps)?
        .into_iter()
        .map(|c| Ok((c.n, run_grid(&c)?)))
        .collect()
}
