//! Serialized results: the JSON report, curve CSVs and simulation tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format_f64;
use crate::error::{Error, Result};
use crate::estimator::CenteredCurve;
use crate::penalized::TuningPath;
use crate::simulation::{SimMetrics, Table1Row, Table2Row};
use crate::spline::{unit_grid, SplineSpace};

pub const SCHEMA_VERSION: u32 = 1;
/// Points in exported curve and basis grids.
pub const CURVE_POINTS: usize = 201;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub kind: String,
    pub alpha: f64,
    /// True when `alpha` was estimated from a working-independence fit.
    pub alpha_estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub kind: String,
    pub a: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub lambda_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub active_size: usize,
    pub bic: Option<f64>,
    pub effective_params: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_clusters: usize,
    pub n_obs: usize,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub hessian_condition: Option<f64>,
    pub spline_eigen_min: Option<f64>,
    pub spline_eigen_max: Option<f64>,
    pub excluded_replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub coefficients: Vec<CoefficientReport>,
    pub active_set: Vec<usize>,
    pub intercept_shift: Option<f64>,
    pub covariance: Option<CovarianceReport>,
    pub penalty: Option<PenaltyReport>,
    pub bic: Option<f64>,
    pub lambda_path: Vec<PathEntry>,
    pub curves_file: Option<String>,
    pub diagnostics: Diagnostics,
    pub simulation: Vec<SimMetrics>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            coefficients: Vec::new(),
            active_set: Vec::new(),
            intercept_shift: None,
            covariance: None,
            penalty: None,
            bic: None,
            lambda_path: Vec::new(),
            curves_file: None,
            diagnostics: Diagnostics::default(),
            simulation: Vec::new(),
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn path_entries(path: &TuningPath) -> Vec<PathEntry> {
    path.records
        .iter()
        .map(|r| PathEntry {
            lambda: r.lambda,
            active_size: r.active_size,
            bic: finite(r.bic),
            effective_params: finite(r.effective_params),
            converged: r.converged,
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, report).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    writeln!(w).map_err(io(path))?;
    w.flush().map_err(io(path))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let file = File::open(path).map_err(io(path))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
    let wrap = |source| Error::Csv { path: path.to_path_buf(), source };
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(io(path))
}

/// Curves on a [`CURVE_POINTS`] grid over [0, 1]: columns `z, eta_1, ..`.
pub fn write_curves(curves: &[CenteredCurve], path: &Path) -> Result<()> {
    let mut header = vec!["z".to_string()];
    header.extend((1..=curves.len()).map(|l| format!("eta_{l}")));
    let mut rows = Vec::with_capacity(CURVE_POINTS);
    for z in unit_grid(CURVE_POINTS) {
        let mut row = vec![format_f64(z)];
        for c in curves {
            row.push(format_f64(c.eval(z)?));
        }
        rows.push(row);
    }
    write_rows(path, &header, rows)
}

/// Basis values on a grid over [0, 1]: columns `z, B1, .., BJ`.
pub fn write_basis(space: &SplineSpace, points: usize, path: &Path) -> Result<()> {
    let mut header = vec!["z".to_string()];
    header.extend((1..=space.dimension()).map(|s| format!("B{s}")));
    let mut rows = Vec::with_capacity(points);
    for z in unit_grid(points) {
        let mut row = vec![format_f64(z)];
        row.extend(space.eval_basis(z)?.into_iter().map(format_f64));
        rows.push(row);
    }
    write_rows(path, &header, rows)
}

pub fn write_table1(rows: &[Table1Row], path: &Path) -> Result<()> {
    let header: Vec<String> = ["n", "penalty", "covariance", "C", "I", "MRME", "RMSE"].map(String::from).to_vec();
    write_rows(
        path,
        &header,
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.penalty.clone(),
                r.covariance.clone(),
                format_f64(r.c),
                format_f64(r.i),
                format_f64(r.mrme),
                format_f64(r.rmse),
            ]
        }),
    )
}

pub fn write_table2(rows: &[Table2Row], path: &Path) -> Result<()> {
    let mut header: Vec<String> = ["n", "penalty", "covariance"].map(String::from).to_vec();
    if let Some(first) = rows.first() {
        for cell in &first.cells {
            let k = cell.coef + 1;
            header.extend([format!("SD_beta{k}"), format!("SDm_beta{k}"), format!("SDmad_beta{k}")]);
        }
    }
    write_rows(
        path,
        &header,
        rows.iter().map(|r| {
            let mut row = vec![r.n.to_string(), r.penalty.clone(), r.covariance.clone()];
            for c in &r.cells {
                row.extend([format_f64(c.sd), format_f64(c.sd_m), format_f64(c.sd_mad)]);
            }
            row
        }),
    )
}
