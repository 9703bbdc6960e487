//! File formats: indicator data as headerless CSV, model parameters and
//! simulation settings as JSON, simulation summaries as CSV.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use reflexive_core::{ConstraintMode, Dataset, ErrorStructure, Estimator, KnownZeros, PathParams, SimConfig, SimResult};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    /// The file does not match the declared dimensions.
    #[error("{0}")]
    Shape(String),
    /// Unparseable or invalid content.
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Reads a headerless, comma-delimited table with `p + r` numeric columns.
/// Positions in error messages are 1-based.
pub fn read_dataset<R: Read>(reader: R, p: usize, r: usize) -> Result<Dataset, IoError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let width = p + r;
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in csv.records().enumerate() {
        let record = record.map_err(|e| IoError::Data(format!("row {}: {e}", i + 1)))?;
        if record.len() == 1 && record.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != width {
            return Err(IoError::Shape(format!(
                "row {} has {} columns but --p + --r = {width}",
                i + 1,
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                IoError::Data(format!("row {}, column {}: cannot parse {:?} as a number", i + 1, j + 1, field))
            })?;
            if !v.is_finite() {
                return Err(IoError::Data(format!("row {}, column {}: non-finite value {:?}", i + 1, j + 1, field)));
            }
            values.push(v);
        }
        n += 1;
    }
    let rows = DMatrix::from_row_slice(n, width, &values);
    Dataset::new(rows, p, r).map_err(|e| IoError::Shape(e.to_string()))
}

fn missing_fields(obj: &serde_json::Map<String, Value>, required: &[&str]) -> Vec<String> {
    required.iter().filter(|k| !obj.contains_key(**k)).map(|k| k.to_string()).collect()
}

fn as_object<'a>(v: &'a Value, what: &str) -> Result<&'a serde_json::Map<String, Value>, IoError> {
    v.as_object().ok_or_else(|| IoError::Data(format!("{what} must be a JSON object")))
}

fn parse_json(text: &str) -> Result<Value, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::Data(format!("invalid JSON: {e}")))
}

fn number(v: &Value, field: &str) -> Result<f64, IoError> {
    v.as_f64().ok_or_else(|| IoError::Data(format!("field `{field}` must be a number")))
}

fn vector(v: &Value, field: &str) -> Result<DVector<f64>, IoError> {
    let arr = v.as_array().ok_or_else(|| IoError::Data(format!("field `{field}` must be an array of numbers")))?;
    let vals = arr.iter().map(|x| number(x, field)).collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(vals))
}

/// Square matrix given either as nested rows or as a flat row-major array.
fn square(v: &Value, field: &str, k: usize) -> Result<DMatrix<f64>, IoError> {
    let arr = v.as_array().ok_or_else(|| IoError::Data(format!("field `{field}` must be an array")))?;
    let flat: Vec<f64> = if arr.iter().all(Value::is_array) {
        let mut out = Vec::new();
        for row in arr {
            let row = vector(row, field)?;
            if row.len() != k {
                return Err(IoError::Data(format!("field `{field}` rows must have {k} entries")));
            }
            out.extend(row.iter());
        }
        out
    } else {
        vector(v, field)?.as_slice().to_vec()
    };
    if flat.len() != k * k {
        return Err(IoError::Data(format!(
            "field `{field}` must have {k}×{k} = {} entries, found {}",
            k * k,
            flat.len()
        )));
    }
    Ok(DMatrix::from_row_slice(k, k, &flat))
}

const PARAM_FIELDS: [&str; 8] = [
    "beta_x_xi",
    "beta_y_eta",
    "sigma_x_given_xi",
    "sigma_y_given_eta",
    "var_xi",
    "var_eta",
    "cov_xi_eta",
    "constraint_mode",
];

/// Parses model parameters. `p`, `r`, `mu_x` and `mu_y` are optional; an
/// optional `known_zeros` object lists zero-based off-diagonal positions.
pub fn parse_path_params(text: &str) -> Result<(PathParams, Option<KnownZeros>), IoError> {
    let value = parse_json(text)?;
    let obj = as_object(&value, "parameter file")?;
    let missing = missing_fields(obj, &PARAM_FIELDS);
    if !missing.is_empty() {
        return Err(IoError::Data(format!("missing required fields: {}", missing.join(", "))));
    }
    let beta_x = vector(&obj["beta_x_xi"], "beta_x_xi")?;
    let beta_y = vector(&obj["beta_y_eta"], "beta_y_eta")?;
    let (p, r) = (beta_x.len(), beta_y.len());
    for (key, expect) in [("p", p), ("r", r)] {
        if let Some(v) = obj.get(key) {
            if v.as_u64() != Some(expect as u64) {
                return Err(IoError::Data(format!("field `{key}` does not match the loading length {expect}")));
            }
        }
    }
    let mean = |key: &str, k: usize| -> Result<DVector<f64>, IoError> {
        obj.get(key).map_or(Ok(DVector::zeros(k)), |v| vector(v, key))
    };
    let mode = match obj["constraint_mode"].as_str() {
        Some("marginal") => ConstraintMode::Marginal,
        Some("regression") => ConstraintMode::Regression,
        _ => return Err(IoError::Data("field `constraint_mode` must be \"marginal\" or \"regression\"".into())),
    };
    let params = PathParams {
        p,
        r,
        mu_x: mean("mu_x", p)?,
        mu_y: mean("mu_y", r)?,
        beta_x_xi: beta_x,
        beta_y_eta: beta_y,
        sigma_x_given_xi: square(&obj["sigma_x_given_xi"], "sigma_x_given_xi", p)?,
        sigma_y_given_eta: square(&obj["sigma_y_given_eta"], "sigma_y_given_eta", r)?,
        var_xi: number(&obj["var_xi"], "var_xi")?,
        var_eta: number(&obj["var_eta"], "var_eta")?,
        cov_xi_eta: number(&obj["cov_xi_eta"], "cov_xi_eta")?,
        constraint_mode: mode,
    };
    params.validate().map_err(|e| IoError::Data(e.to_string()))?;
    let zeros = obj.get("known_zeros").map(parse_known_zeros).transpose()?;
    Ok((params, zeros))
}

fn parse_known_zeros(v: &Value) -> Result<KnownZeros, IoError> {
    let obj = as_object(v, "known_zeros")?;
    let pairs = |key: &str| -> Result<Vec<(usize, usize)>, IoError> {
        let Some(list) = obj.get(key) else { return Ok(Vec::new()) };
        let bad = || IoError::Data(format!("known_zeros.{key} must be a list of [i, j] index pairs"));
        list.as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|pair| match pair.as_array().map(|a| a.as_slice()) {
                Some([i, j]) => Ok((i.as_u64().ok_or_else(bad)? as usize, j.as_u64().ok_or_else(bad)? as usize)),
                _ => Err(bad()),
            })
            .collect()
    };
    Ok(KnownZeros { x: pairs("x")?, y: pairs("y")? })
}

/// Parses a simulation configuration. `seed`, `reps` and `estimators` are
/// optional here because the command line can supply them.
pub fn parse_sim_config(text: &str) -> Result<PartialSimConfig, IoError> {
    let value = parse_json(text)?;
    let obj = as_object(&value, "simulation config")?;
    let missing = missing_fields(obj, &["loading", "error_structure", "rho_grid", "n"]);
    if !missing.is_empty() {
        return Err(IoError::Data(format!("missing required fields: {}", missing.join(", "))));
    }
    let error_structure = match obj["error_structure"].as_str() {
        Some("identity") => ErrorStructure::Identity,
        Some("envelope_structured") => ErrorStructure::EnvelopeStructured,
        _ => {
            return Err(IoError::Data(
                "field `error_structure` must be \"identity\" or \"envelope_structured\"".into(),
            ))
        }
    };
    let count = |key: &str| -> Result<Option<u64>, IoError> {
        obj.get(key)
            .map(|v| v.as_u64().ok_or_else(|| IoError::Data(format!("field `{key}` must be a non-negative integer"))))
            .transpose()
    };
    let estimators = match obj.get("estimators") {
        None => None,
        Some(v) => Some(
            v.as_array()
                .ok_or_else(|| IoError::Data("field `estimators` must be an array of names".into()))?
                .iter()
                .map(|e| {
                    e.as_str().and_then(Estimator::parse).ok_or_else(|| {
                        IoError::Data(format!("unknown estimator {e}; expected rrr, pls, serr, sem, pca or unit"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    Ok(PartialSimConfig {
        loading: vector(&obj["loading"], "loading")?,
        error_structure,
        rho_grid: vector(&obj["rho_grid"], "rho_grid")?.as_slice().to_vec(),
        n: count("n")?.expect("checked above") as usize,
        reps: count("reps")?.map(|v| v as usize),
        seed: count("seed")?,
        estimators,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialSimConfig {
    pub loading: DVector<f64>,
    pub error_structure: ErrorStructure,
    pub rho_grid: Vec<f64>,
    pub n: usize,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub estimators: Option<Vec<Estimator>>,
}

impl PartialSimConfig {
    /// Fills in the seed and optional overrides. Replications default to 10
    /// and estimators to rrr, pls, serr and sem.
    pub fn complete(self, seed: u64, reps: Option<usize>) -> SimConfig {
        SimConfig {
            loading: self.loading,
            error_structure: self.error_structure,
            rho_grid: self.rho_grid,
            n: self.n,
            reps: reps.or(self.reps).unwrap_or(reflexive_core::sim::DEFAULT_REPS),
            seed,
            estimators: self.estimators.unwrap_or_else(|| reflexive_core::sim::DEFAULT_ESTIMATORS.to_vec()),
        }
    }
}

/// Formats with 12 significant digits, dropping trailing zeros.
pub fn format_sig(v: f64) -> String {
    const DIGITS: i32 = 12;
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let mut s = if (-5..15).contains(&exp) {
        format!("{:.*}", (DIGITS - 1 - exp).max(0) as usize, v)
    } else {
        format!("{:.*e}", (DIGITS - 1) as usize, v)
    };
    if let Some(e_pos) = s.find('e') {
        let (mant, exp_part) = s.split_at(e_pos);
        let mant = trim_zeros(mant);
        return format!("{mant}{exp_part}");
    }
    if s.contains('.') {
        s = trim_zeros(&s).to_string();
    }
    s
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CSV_HEADER: [&str; 7] = ["rho", "estimator", "mean", "sd", "n_fail", "target_marginal", "target_regression"];

/// Writes one row per (rho, estimator); missing means and standard
/// deviations are empty fields.
pub fn write_sim_csv<W: Write>(result: &SimResult, writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| IoError::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_default();
    for row in &result.rows {
        w.write_record([
            format_sig(row.rho),
            row.estimator.name().to_string(),
            opt(row.mean),
            opt(row.sd),
            row.n_fail.to_string(),
            format_sig(row.target_marginal),
            format_sig(row.target_regression),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One summary line per estimator: mean absolute deviation of the cell
/// means from both targets and the total failure count.
pub fn summary_lines(result: &SimResult) -> Vec<String> {
    let mut order: Vec<Estimator> = Vec::new();
    for row in &result.rows {
        if !order.contains(&row.estimator) {
            order.push(row.estimator);
        }
    }
    order
        .into_iter()
        .map(|e| {
            let rows: Vec<_> = result.rows_for(e).collect();
            let fails: usize = rows.iter().map(|r| r.n_fail).sum();
            let with_mean: Vec<_> = rows.iter().filter_map(|r| r.mean.map(|m| (m, r))).collect();
            let mut line = format!("{:<5} cells={} failures={}", e.name(), rows.len(), fails);
            if !with_mean.is_empty() {
                let k = with_mean.len() as f64;
                let dm: f64 = with_mean.iter().map(|(m, r)| (m - r.target_marginal).abs()).sum::<f64>() / k;
                let dr: f64 = with_mean.iter().map(|(m, r)| (m - r.target_regression).abs()).sum::<f64>() / k;
                let _ = write!(line, " mean|dev| marginal={dm:.4} regression={dr:.4}");
            }
            line
        })
        .collect()
}
