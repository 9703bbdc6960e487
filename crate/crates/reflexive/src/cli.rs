use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use reflexive_core::model::{population_reg_variances, SideIdentification};
use reflexive_core::{
    bias_factor, check_identifiability, convert_constraints, fit_dataset, joint_covariance, population_cor_regression,
    signal_strengths, ConstraintMode, Dimensions, EnvelopeOptions, Estimator, FitResult, FitSettings, KnownZeros,
    SemOptions, SimResult,
};
use serde_json::{json, Value};

use crate::io::{self, IoError};
use crate::parallel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "reflexive", version, about = "Construct-correlation estimators for two-block reflexive path models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Rrr,
    Pls,
    Serr,
    Sem,
    Pca,
    Unit,
}

impl From<Method> for Estimator {
    fn from(m: Method) -> Self {
        match m {
            Method::Rrr => Estimator::Rrr,
            Method::Pls => Estimator::Pls,
            Method::Serr => Estimator::Serr,
            Method::Sem => Estimator::Sem,
            Method::Pca => Estimator::Pca,
            Method::Unit => Estimator::Unit,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator to a data file and print the result as JSON.
    ///
    /// The file is headerless CSV with the p X columns first, then the r Y
    /// columns. Covariances use divisor n (maximum likelihood).
    Fit {
        data: PathBuf,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, value_enum, default_value = "rrr")]
        method: Method,
        /// Envelope dimension for X (pls and serr).
        #[arg(long, default_value_t = 1)]
        ux: usize,
        /// Envelope dimension for Y (pls and serr).
        #[arg(long, default_value_t = 1)]
        uy: usize,
        /// Choose the dimensions by BIC instead of --ux/--uy.
        #[arg(long)]
        select_dims: bool,
        /// Seed for the SEM start perturbations.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SEM iteration limit per start.
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        /// SEM convergence threshold on the gradient max-norm.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        /// Number of SEM starts.
        #[arg(long, default_value_t = 5)]
        starts: usize,
    },
    /// Print population quantities for a parameter file.
    Population { params: PathBuf },
    /// Run a Monte Carlo grid described by a JSON config and write CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Run the published simulation settings for a figure and write CSV.
    ///
    /// Figures with two sample sizes write one file per size with an `_n<N>`
    /// suffix before the extension.
    Reproduce {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
        figure: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = reflexive_core::sim::DEFAULT_REPS)]
        reps: usize,
        /// Only run the configuration with this sample size.
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: m.into() }
    }

    fn data(m: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: m.into() }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Shape(m) => Self::usage(m),
            IoError::Data(m) => Self::data(m),
            IoError::Io(e) => Self::data(format!("I/O error: {e}")),
        }
    }
}

impl From<reflexive_core::Error> for Failure {
    fn from(e: reflexive_core::Error) -> Self {
        Self::data(e.to_string())
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    match run(cli.command, stdout) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Fit {
            data,
            p,
            r,
            method,
            ux,
            uy,
            select_dims,
            seed,
            max_iter,
            tol,
            starts,
        } => {
            if ux > p || uy > r {
                return Err(Failure::usage(format!("--ux {ux} / --uy {uy} exceed --p {p} / --r {r}")));
            }
            let file = File::open(&data).map_err(|e| Failure::data(format!("{}: {e}", data.display())))?;
            let dataset = io::read_dataset(BufReader::new(file), p, r)?;
            let settings = FitSettings {
                dims: if select_dims { Dimensions::Select } else { Dimensions::Fixed { u_x: ux, u_y: uy } },
                sem: SemOptions {
                    max_iter,
                    grad_tol: tol,
                    starts: starts.max(1),
                    seed,
                    ..SemOptions::default()
                },
                envelope: EnvelopeOptions::default(),
            };
            let fit = fit_dataset(&dataset, method.into(), &settings)?;
            let value = fit_json(&fit, dataset.n(), p, r);
            writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("serializable")).map_err(io_failure)?;
            Ok(if fit.diagnostics.converged { EXIT_OK } else { EXIT_NONCONVERGENCE })
        }
        Command::Population { params } => {
            let text = std::fs::read_to_string(&params).map_err(|e| Failure::data(format!("{}: {e}", params.display())))?;
            let (params, zeros) = io::parse_path_params(&text)?;
            let value = population_json(&params, zeros)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("serializable")).map_err(io_failure)?;
            Ok(EXIT_OK)
        }
        Command::Simulate { config, out: path, seed, reps } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Failure::data(format!("{}: {e}", config.display())))?;
            let config = io::parse_sim_config(&text)?.complete(seed, reps);
            config.validate().map_err(|e| Failure::data(e.to_string()))?;
            let result = parallel::run_grid_parallel(&config)?;
            write_result(&result, &path, config.n, out)?;
            Ok(EXIT_OK)
        }
        Command::Reproduce {
            figure,
            out: path,
            seed,
            reps,
            n,
        } => {
            if reps == 0 {
                return Err(Failure::usage("--reps must be at least 1"));
            }
            let mut configs = reflexive_core::sim::figure_configs(figure, seed, reps)?;
            let multiple = configs.len() > 1;
            if let Some(n) = n {
                configs.retain(|c| c.n == n);
                if configs.is_empty() {
                    return Err(Failure::usage(format!("figure {figure} has no configuration with n = {n}")));
                }
            }
            for config in &configs {
                let result = parallel::run_grid_parallel(config)?;
                let target = if multiple { suffixed(&path, config.n) } else { path.clone() };
                write_result(&result, &target, config.n, out)?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::data(format!("I/O error: {e}"))
}

/// `dir/name.csv` → `dir/name_n100.csv`.
pub fn suffixed(path: &Path, n: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_n{n}.{}", ext.to_string_lossy()),
        None => format!("{stem}_n{n}"),
    };
    path.with_file_name(name)
}

fn write_result(result: &SimResult, path: &Path, n: usize, out: &mut dyn Write) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    io::write_sim_csv(result, BufWriter::new(file))?;
    writeln!(out, "wrote {} (n = {n})", path.display()).map_err(io_failure)?;
    for note in &result.notes {
        writeln!(out, "  note: {note}").map_err(io_failure)?;
    }
    for line in io::summary_lines(result) {
        writeln!(out, "  {line}").map_err(io_failure)?;
    }
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Value {
    Value::Array(m.row_iter().map(|row| json!(row.iter().copied().collect::<Vec<f64>>())).collect())
}

pub fn fit_json(fit: &FitResult, n: usize, p: usize, r: usize) -> Value {
    let d = &fit.diagnostics;
    let mut value = json!({
        "estimator": fit.estimator.name(),
        "estimate_cor_regression": fit.estimate_cor_regression,
        "n": n,
        "p": p,
        "r": r,
        "diagnostics": {
            "converged": d.converged,
            "iterations": d.iterations,
            "degenerate": d.degenerate,
            "tied": d.tied,
            "dims_selected": d.dims_selected,
            "notes": d.notes,
        },
    });
    let obj = value.as_object_mut().expect("object");
    if let Some(w) = &fit.weights {
        obj.insert("u_x".into(), json!(w.u_x));
        obj.insert("u_y".into(), json!(w.u_y));
        obj.insert(
            "weights".into(),
            json!({
                "method": format!("{:?}", w.method).to_lowercase(),
                "phi": matrix_rows(&w.phi),
                "gamma": matrix_rows(&w.gamma),
            }),
        );
    }
    if let Some(sem) = &fit.sem {
        obj.insert("rho".into(), json!(sem.rho));
        obj.insert("implied_reg_correlation".into(), json!(fit.estimate_cor_regression));
        obj.insert(
            "sem".into(),
            json!({
                "lambda_x": sem.lambda_x.as_slice(),
                "lambda_y": sem.lambda_y.as_slice(),
                "d_x": sem.d_x.as_slice(),
                "d_y": sem.d_y.as_slice(),
                "neg_loglik": sem.neg_loglik,
                "grad_inf": sem.grad_inf,
                "best_start": sem.best_start,
                "heywood": sem.heywood,
            }),
        );
    }
    value
}

fn side_json(s: &SideIdentification) -> Value {
    json!({
        "identified": s.identified,
        "witness": s.witness.map(|(i, j)| [i, j]),
        "ignored": s.ignored.iter().map(|&(i, j)| [i, j]).collect::<Vec<_>>(),
    })
}

pub fn population_json(params: &reflexive_core::PathParams, zeros: Option<KnownZeros>) -> Result<Value, Failure> {
    let marginal = match params.constraint_mode {
        ConstraintMode::Marginal => Ok(params.clone()),
        ConstraintMode::Regression => convert_constraints(params, ConstraintMode::Marginal),
    };
    let cov = joint_covariance(params)?;
    let cor_regression = population_cor_regression(&cov)?;
    let (reg_xi, reg_eta) = population_reg_variances(params)?;
    let zeros = zeros.unwrap_or_else(|| KnownZeros::from_params(params));
    let report = check_identifiability(params, &zeros);
    let (bias, h) = match &marginal {
        Ok(m) => (Some(bias_factor(m)?), Some(signal_strengths(m)?)),
        Err(_) => (None, None),
    };
    Ok(json!({
        "constraint_mode": match params.constraint_mode {
            ConstraintMode::Marginal => "marginal",
            ConstraintMode::Regression => "regression",
        },
        "cor_xi_eta": params.cor_xi_eta(),
        "cor_regression": cor_regression,
        "bias_factor": bias,
        "h_xi": h.map(|h| h.0),
        "h_eta": h.map(|h| h.1),
        "var_reg_xi": reg_xi,
        "var_reg_eta": reg_eta,
        "identifiability": {
            "x": side_json(&report.x),
            "y": side_json(&report.y),
            "cor_identified": report.cor_identified(),
        },
    }))
}
