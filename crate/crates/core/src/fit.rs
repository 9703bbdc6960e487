//! Single entry point that runs any estimator on a set of sample moments.

use alloc::string::String;
use alloc::vec::Vec;

use crate::envelope::{self, CompositeWeights, EnvelopeOptions, WeightMethod};
use crate::error::{Error, Result};
use crate::moments::{compute_moments, Dataset, SampleMoments};
use crate::rrr::fit_rank1;
use crate::sem::{fit_sem, sem_implied_reg_correlation, SemFit, SemOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Rrr,
    Pls,
    Serr,
    Sem,
    Pca,
    Unit,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [Self::Rrr, Self::Pls, Self::Serr, Self::Sem, Self::Pca, Self::Unit];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rrr => "rrr",
            Self::Pls => "pls",
            Self::Serr => "serr",
            Self::Sem => "sem",
            Self::Pca => "pca",
            Self::Unit => "unit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

impl core::fmt::Display for Estimator {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the composite estimators pick their dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimensions {
    Fixed { u_x: usize, u_y: usize },
    /// BIC over the full grid, using the estimator's own bases.
    Select,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub dims: Dimensions,
    pub sem: SemOptions,
    pub envelope: EnvelopeOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            dims: Dimensions::Fixed { u_x: 1, u_y: 1 },
            sem: SemOptions::default(),
            envelope: EnvelopeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// The estimate is zero because a composite basis is empty.
    pub degenerate: bool,
    /// The two leading canonical correlations coincide.
    pub tied: bool,
    pub dims_selected: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub estimator: Estimator,
    /// Estimate of |cor{E(ξ|X), E(η|Y)}|.
    pub estimate_cor_regression: f64,
    /// Estimate of cor(ξ, η); only SEM provides one.
    pub cor_xi_eta: Option<f64>,
    pub weights: Option<CompositeWeights>,
    pub sem: Option<SemFit>,
    pub diagnostics: FitDiagnostics,
}

pub fn fit_dataset(data: &Dataset, estimator: Estimator, settings: &FitSettings) -> Result<FitResult> {
    fit_moments(&compute_moments(data)?, estimator, settings)
}

pub fn fit_moments(m: &SampleMoments, estimator: Estimator, settings: &FitSettings) -> Result<FitResult> {
    match estimator {
        Estimator::Rrr => {
            let fit = fit_rank1(m)?;
            Ok(FitResult {
                estimator,
                estimate_cor_regression: fit.d1.clamp(0.0, 1.0),
                cor_xi_eta: None,
                weights: None,
                sem: None,
                diagnostics: FitDiagnostics {
                    converged: true,
                    tied: fit.tied,
                    ..Default::default()
                },
            })
        }
        Estimator::Sem => {
            let fit = fit_sem(m, &settings.sem)?;
            let implied = sem_implied_reg_correlation(&fit)?;
            let mut notes = Vec::new();
            if !fit.heywood.is_empty() {
                notes.push(alloc::format!("Heywood case: {} uniqueness entries below floor", fit.heywood.len()));
            }
            Ok(FitResult {
                estimator,
                estimate_cor_regression: implied,
                cor_xi_eta: Some(fit.rho),
                weights: None,
                diagnostics: FitDiagnostics {
                    converged: fit.converged,
                    iterations: fit.iterations,
                    notes,
                    ..Default::default()
                },
                sem: Some(fit),
            })
        }
        Estimator::Pls | Estimator::Serr | Estimator::Pca | Estimator::Unit => composite(m, estimator, settings),
    }
}

fn composite(m: &SampleMoments, estimator: Estimator, settings: &FitSettings) -> Result<FitResult> {
    let method = match estimator {
        Estimator::Pls => WeightMethod::Simpls,
        Estimator::Serr => WeightMethod::EnvelopeMle,
        Estimator::Pca => WeightMethod::Pca,
        Estimator::Unit => WeightMethod::Unit,
        _ => unreachable!("not a composite estimator"),
    };
    let mut diagnostics = FitDiagnostics::default();
    let (u_x, u_y) = match (method, settings.dims) {
        (WeightMethod::Pca | WeightMethod::Unit, Dimensions::Select) => {
            return Err(Error::InvalidParams(alloc::format!("{estimator} composites have fixed dimension 1")));
        }
        (WeightMethod::Pca | WeightMethod::Unit, _) => (1, 1),
        (_, Dimensions::Fixed { u_x, u_y }) => (u_x, u_y),
        (_, Dimensions::Select) => {
            let sel = envelope::select_dimensions_from_moments(m, method, &settings.envelope)?;
            diagnostics.dims_selected = true;
            (sel.u_x, sel.u_y)
        }
    };
    let fit = envelope::serr_from_moments(m, u_x, u_y, method, &settings.envelope)?;
    diagnostics.converged = fit.weights.converged();
    diagnostics.iterations = fit.weights.trace_x.iter().chain(&fit.weights.trace_y).map(|t| t.iterations).sum();
    diagnostics.degenerate = fit.degenerate;
    if fit.degenerate {
        diagnostics.notes.push("empty composite basis: estimate is zero".into());
    }
    if !fit.degenerate {
        diagnostics.tied = fit_rank1(&m.project(&fit.weights.phi, &fit.weights.gamma))?.tied;
    }
    Ok(FitResult {
        estimator,
        estimate_cor_regression: fit.estimate,
        cor_xi_eta: None,
        weights: Some(fit.weights),
        sem: None,
        diagnostics,
    })
}
