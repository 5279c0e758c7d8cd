//! Clustered longitudinal observations.
//!
//! A [`ClusteredDataset`] holds one [`Cluster`] per subject. Each cluster carries the
//! response vector, the parametric design `x` (m_i × d1), the nonparametric covariates
//! `z` (m_i × d2) and, optionally, observation times used by serial working covariances.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub times: Option<DVector<f64>>,
}

impl Cluster {
    pub fn new(
        id: impl Into<String>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        times: Option<DVector<f64>>,
    ) -> Result<Self> {
        let m = y.len();
        if m == 0 {
            return Err(Error::Schema("cluster has no observations".into()));
        }
        if x.nrows() != m || z.nrows() != m || times.as_ref().is_some_and(|t| t.len() != m) {
            return Err(Error::Schema(format!(
                "cluster row counts disagree: y={m}, x={}, z={}",
                x.nrows(),
                z.nrows()
            )));
        }
        Ok(Self { id: id.into(), y, x, z, times })
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// One flat input row, before grouping by subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject: String,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    d1: usize,
    d2: usize,
    n_obs: usize,
    intercept: Option<usize>,
}

/// Column means removed from X by [`center_x`].
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringRecord {
    pub x_means: Vec<f64>,
}

/// Affine map `z -> (z - lower) / (upper - lower)` applied to one Z column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScaling {
    pub lower: f64,
    pub upper: f64,
}

impl ZScaling {
    pub fn apply(&self, z: f64) -> f64 {
        (z - self.lower) / (self.upper - self.lower)
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.lower + u * (self.upper - self.lower)
    }
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        let first = clusters.first().ok_or(Error::EmptyDataset)?;
        let d1 = first.x.ncols();
        let d2 = first.z.ncols();
        let has_times = first.times.is_some();
        for c in &clusters {
            if c.x.ncols() != d1 || c.z.ncols() != d2 {
                return Err(Error::Schema(format!(
                    "cluster '{}' has {}x/{}z columns, expected {d1}/{d2}",
                    c.id,
                    c.x.ncols(),
                    c.z.ncols()
                )));
            }
            if c.times.is_some() != has_times {
                return Err(Error::Schema(
                    "observation times must be present for all clusters or none".into(),
                ));
            }
        }
        let n_obs = clusters.iter().map(Cluster::size).sum();
        Ok(Self { clusters, d1, d2, n_obs, intercept: None })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    /// Number of clusters.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations, `n_T`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(Cluster::size).max().unwrap_or(0)
    }

    pub fn has_times(&self) -> bool {
        self.clusters.first().is_some_and(|c| c.times.is_some())
    }

    /// Index of the X column holding the intercept, if one was added.
    pub fn intercept(&self) -> Option<usize> {
        self.intercept
    }

    /// Prepends a column of ones to X and marks it as the intercept.
    pub fn with_intercept(&self) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let m = c.size();
                let x = DMatrix::from_fn(m, self.d1 + 1, |i, j| if j == 0 { 1.0 } else { c.x[(i, j - 1)] });
                Cluster { x, ..c.clone() }
            })
            .collect();
        Self { clusters, d1: self.d1 + 1, intercept: Some(0), ..*self }
    }

    /// Keeps only the listed X columns, in the given order.
    pub fn select_x(&self, cols: &[usize]) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster { x: crate::linalg::select_cols(&c.x, cols), ..c.clone() })
            .collect();
        let intercept = self.intercept.and_then(|i| cols.iter().position(|&c| c == i));
        Self { clusters, d1: cols.len(), intercept, ..*self }
    }

    /// Stacks all X rows into an n_T × d1 matrix.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_obs, self.d1);
        let mut row = 0;
        for c in &self.clusters {
            out.rows_mut(row, c.size()).copy_from(&c.x);
            row += c.size();
        }
        out
    }

    pub fn stacked_z_column(&self, l: usize) -> Vec<f64> {
        self.clusters.iter().flat_map(|c| c.z.column(l).iter().copied().collect::<Vec<_>>()).collect()
    }
}

/// Groups flat rows by subject, in order of first appearance.
pub fn assemble_dataset(records: &[Record]) -> Result<ClusteredDataset> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let (d1, d2, timed) = (first.x.len(), first.z.len(), first.time.is_some());
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Record>> = HashMap::new();
    for (row, r) in records.iter().enumerate() {
        if r.x.len() != d1 || r.z.len() != d2 || r.time.is_some() != timed {
            return Err(Error::Schema(format!(
                "row {row} (subject '{}') has {} x, {} z values{}; expected {d1}, {d2}{}",
                r.subject,
                r.x.len(),
                r.z.len(),
                if r.time.is_some() { " and a time" } else { "" },
                if timed { " and a time" } else { "" },
            )));
        }
        groups
            .entry(r.subject.as_str())
            .or_insert_with(|| {
                order.push(r.subject.as_str());
                Vec::new()
            })
            .push(r);
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let rows = &groups[id];
            let m = rows.len();
            let y = DVector::from_iterator(m, rows.iter().map(|r| r.y));
            let x = DMatrix::from_fn(m, d1, |i, j| rows[i].x[j]);
            let z = DMatrix::from_fn(m, d2, |i, j| rows[i].z[j]);
            let times = timed.then(|| DVector::from_iterator(m, rows.iter().map(|r| r.time.unwrap())));
            Cluster::new(id, y, x, z, times)
        })
        .collect::<Result<Vec<_>>>()?;
    ClusteredDataset::new(clusters)
}

/// Removes pooled column means from X. The intercept column, if any, is left alone.
pub fn center_x(dataset: &ClusteredDataset) -> (ClusteredDataset, CenteringRecord) {
    let n_obs = dataset.n_obs as f64;
    let mut means = vec![0.0; dataset.d1];
    for c in &dataset.clusters {
        for (k, mean) in means.iter_mut().enumerate() {
            *mean += c.x.column(k).sum();
        }
    }
    for (k, mean) in means.iter_mut().enumerate() {
        *mean = if dataset.intercept == Some(k) { 0.0 } else { *mean / n_obs };
    }
    let clusters = dataset
        .clusters
        .iter()
        .map(|c| {
            let mut x = c.x.clone();
            for (k, mean) in means.iter().enumerate() {
                x.column_mut(k).add_scalar_mut(-mean);
            }
            Cluster { x, ..c.clone() }
        })
        .collect();
    (ClusteredDataset { clusters, ..dataset.clone() }, CenteringRecord { x_means: means })
}

/// Maps every Z column affinely onto [0, 1] using its pooled min and max.
pub fn rescale_z(dataset: &ClusteredDataset) -> Result<(ClusteredDataset, Vec<ZScaling>)> {
    let scalings = (0..dataset.d2)
        .map(|l| {
            let (lower, upper) = dataset.clusters.iter().flat_map(|c| c.z.column(l).iter().copied().collect::<Vec<_>>()).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(v), hi.max(v)),
            );
            if !(upper > lower) {
                return Err(Error::DegenerateCovariate { column: l + 1, value: lower });
            }
            Ok(ZScaling { lower, upper })
        })
        .collect::<Result<Vec<_>>>()?;
    let clusters = dataset
        .clusters
        .iter()
        .map(|c| {
            let mut z = c.z.clone();
            for (l, s) in scalings.iter().enumerate() {
                z.column_mut(l).apply(|v| *v = s.apply(*v).clamp(0.0, 1.0));
            }
            Cluster { z, ..c.clone() }
        })
        .collect();
    Ok((ClusteredDataset { clusters, ..dataset.clone() }, scalings))
}

/// Column layout parsed from a CSV header `subject,y,x1..xd1,z1..zd2[,time]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvLayout {
    pub d1: usize,
    pub d2: usize,
    pub has_time: bool,
}

pub fn parse_header(header: &[&str]) -> Result<CsvLayout> {
    let bad = |msg: String| Error::Schema(format!("CSV header: {msg}"));
    if header.len() < 2 || header[0] != "subject" || header[1] != "y" {
        return Err(bad("must start with 'subject,y'".into()));
    }
    let rest = &header[2..];
    let has_time = rest.last() == Some(&"time");
    let rest = if has_time { &rest[..rest.len() - 1] } else { rest };
    let d1 = rest.iter().take_while(|h| h.starts_with('x')).count();
    let d2 = rest.len() - d1;
    for (k, h) in rest[..d1].iter().enumerate() {
        if *h != format!("x{}", k + 1) {
            return Err(bad(format!("expected 'x{}', found '{h}'", k + 1)));
        }
    }
    for (l, h) in rest[d1..].iter().enumerate() {
        if *h != format!("z{}", l + 1) {
            return Err(bad(format!("expected 'z{}', found '{h}'", l + 1)));
        }
    }
    Ok(CsvLayout { d1, d2, has_time })
}

pub fn read_records(path: &Path) -> Result<(CsvLayout, Vec<Record>)> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let layout = parse_header(&header.iter().collect::<Vec<_>>())?;
    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let rec = result.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                Error::Schema(format!("row {}: column '{}' is not a number: '{}'", row + 1, &header[i], &rec[i]))
            })
        };
        let x = (0..layout.d1).map(|k| num(2 + k)).collect::<Result<Vec<_>>>()?;
        let z = (0..layout.d2).map(|l| num(2 + layout.d1 + l)).collect::<Result<Vec<_>>>()?;
        let time = if layout.has_time { Some(num(2 + layout.d1 + layout.d2)?) } else { None };
        records.push(Record { subject: rec[0].to_string(), y: num(1)?, x, z, time });
    }
    Ok((layout, records))
}

pub fn read_csv(path: &Path) -> Result<ClusteredDataset> {
    let (_, records) = read_records(path)?;
    assemble_dataset(&records)
}

pub fn write_csv(dataset: &ClusteredDataset, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["subject".to_string(), "y".to_string()];
    header.extend((1..=dataset.d1).map(|k| format!("x{k}")));
    header.extend((1..=dataset.d2).map(|l| format!("z{l}")));
    if dataset.has_times() {
        header.push("time".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for c in &dataset.clusters {
        for j in 0..c.size() {
            let mut row = vec![c.id.clone(), format_f64(c.y[j])];
            row.extend(c.x.row(j).iter().map(|v| format_f64(*v)));
            row.extend(c.z.row(j).iter().map(|v| format_f64(*v)));
            if let Some(t) = &c.times {
                row.push(format_f64(t[j]));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Formats a float with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
