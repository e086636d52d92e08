//! CSV ingestion and emission for the command-line front end.
//!
//! Two input tables are understood:
//!
//! * `curves.csv` — header `subject_id,t,x`; one observation per row.
//! * `subjects.csv` — header `subject_id,y,<covariate names...>`; one
//!   subject per row.
//!
//! Both are UTF-8 with `.` as the decimal point and RFC-4180 quoting.
//! Schema violations are reported with the offending column name and
//! 1-based data row number. Ingest → emit → ingest is the identity on
//! the data model.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use faer::Mat;
use thiserror::Error;

use crate::presmooth::{SmoothError, SubjectCurve, VariableDomainDataset};

#[derive(Error, Debug)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}: malformed CSV: {source}")]
    Csv { path: String, source: csv::Error },

    #[error("{path}: missing required column {column:?} in the header (found: {found})")]
    MissingColumn {
        path: String,
        column: &'static str,
        found: String,
    },

    #[error("{path}, row {row}, column {column:?}: cannot parse {value:?} as a number")]
    BadNumber {
        path: String,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}, row {row}, column {column:?}: value is missing (re-run with --impute to interpolate curve values)")]
    MissingValue {
        path: String,
        row: usize,
        column: String,
    },

    #[error("{path}, row {row}: duplicate observation for subject {subject:?} at t = {t}")]
    DuplicatePoint {
        path: String,
        row: usize,
        subject: String,
        t: f64,
    },

    #[error("{path}, row {row}: duplicate subject {subject:?}")]
    DuplicateSubject {
        path: String,
        row: usize,
        subject: String,
    },

    #[error("{path}, row {row}, column \"t\": negative observation time {t}")]
    NegativeTime { path: String, row: usize, t: f64 },

    #[error("subject {id:?} appears in the curve table but not in the subject table")]
    SubjectMissingFromTable { id: String },

    #[error("subject {id:?} appears in the subject table but has no curve observations")]
    SubjectMissingFromCurves { id: String },

    #[error("subjects with fewer than {min} observations: {ids}")]
    TooFewObservations { min: usize, ids: String },

    #[error("cannot impute: subject {id:?} has no observed values")]
    AllValuesMissing { id: String },

    #[error(transparent)]
    Dataset(#[from] SmoothError),
}

/// One row of the curve table. `x` is `None` when the field is empty
/// (allowed only under imputation).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTableRow {
    pub subject_id: String,
    pub t: f64,
    pub x: Option<f64>,
}

/// One row of the subject table, with covariates in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTableRow {
    pub subject_id: String,
    pub y: f64,
    pub covariates: Vec<f64>,
}

/// The subject table: named covariate columns plus one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<SubjectTableRow>,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, IoError> {
    let file = std::fs::File::open(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_index(
    headers: &csv::StringRecord,
    column: &'static str,
    path: &Path,
) -> Result<usize, IoError> {
    headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| IoError::MissingColumn {
            path: path.display().to_string(),
            column,
            found: headers.iter().collect::<Vec<_>>().join(","),
        })
}

fn parse_field(
    value: &str,
    path: &Path,
    row: usize,
    column: &str,
) -> Result<f64, IoError> {
    value.parse::<f64>().map_err(|_| IoError::BadNumber {
        path: path.display().to_string(),
        row,
        column: column.to_string(),
        value: value.to_string(),
    })
}

/// Read the curve table. Empty `x` fields are kept as `None`; every other
/// schema violation errors with the row number and column name.
pub fn read_curves(path: &Path) -> Result<Vec<CurveTableRow>, IoError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|source| IoError::Csv {
            path: path.display().to_string(),
            source,
        })?
        .clone();
    let id_col = header_index(&headers, "subject_id", path)?;
    let t_col = header_index(&headers, "t", path)?;
    let x_col = header_index(&headers, "x", path)?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|source| IoError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let subject_id = record.get(id_col).unwrap_or("").to_string();
        let t_raw = record.get(t_col).unwrap_or("");
        let t = parse_field(t_raw, path, row, "t")?;
        if t < 0.0 {
            return Err(IoError::NegativeTime {
                path: path.display().to_string(),
                row,
                t,
            });
        }
        let x_raw = record.get(x_col).unwrap_or("");
        let x = if x_raw.is_empty() {
            None
        } else {
            Some(parse_field(x_raw, path, row, "x")?)
        };
        rows.push(CurveTableRow { subject_id, t, x });
    }
    Ok(rows)
}

/// Read the subject table. Every column other than `subject_id` and `y`
/// is a named covariate.
pub fn read_subjects(path: &Path) -> Result<SubjectTable, IoError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|source| IoError::Csv {
            path: path.display().to_string(),
            source,
        })?
        .clone();
    let id_col = header_index(&headers, "subject_id", path)?;
    let y_col = header_index(&headers, "y", path)?;
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_col && i != y_col)
        .map(|(i, name)| (i, name.to_string()))
        .collect();

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|source| IoError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let subject_id = record.get(id_col).unwrap_or("").to_string();
        if !seen.insert(subject_id.clone()) {
            return Err(IoError::DuplicateSubject {
                path: path.display().to_string(),
                row,
                subject: subject_id,
            });
        }
        let y_raw = record.get(y_col).unwrap_or("");
        if y_raw.is_empty() {
            return Err(IoError::MissingValue {
                path: path.display().to_string(),
                row,
                column: "y".to_string(),
            });
        }
        let y = parse_field(y_raw, path, row, "y")?;
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (col, name) in &cov_cols {
            let raw = record.get(*col).unwrap_or("");
            if raw.is_empty() {
                return Err(IoError::MissingValue {
                    path: path.display().to_string(),
                    row,
                    column: name.clone(),
                });
            }
            covariates.push(parse_field(raw, path, row, name)?);
        }
        rows.push(SubjectTableRow {
            subject_id,
            y,
            covariates,
        });
    }
    Ok(SubjectTable {
        covariate_names: cov_cols.into_iter().map(|(_, name)| name).collect(),
        rows,
    })
}

/// Group curve rows into per-subject curves, sorted by `t`, with duplicate
/// `(subject, t)` pairs rejected. Missing values are linearly interpolated
/// between the nearest observed neighbors when `impute` is set (boundary
/// gaps take the nearest observed value) and rejected otherwise.
pub fn group_curves(
    rows: &[CurveTableRow],
    path: &Path,
    impute: bool,
) -> Result<Vec<SubjectCurve>, IoError> {
    // (t, x, 1-based source row), in first-appearance subject order
    let mut order: Vec<String> = Vec::new();
    let mut per: HashMap<String, Vec<(f64, Option<f64>, usize)>> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        if !per.contains_key(&r.subject_id) {
            order.push(r.subject_id.clone());
        }
        per.entry(r.subject_id.clone())
            .or_default()
            .push((r.t, r.x, i + 1));
    }

    let mut curves = Vec::with_capacity(order.len());
    for id in order {
        let mut obs = per.remove(&id).unwrap();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in obs.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(IoError::DuplicatePoint {
                    path: path.display().to_string(),
                    row: w[1].2,
                    subject: id,
                    t: w[1].0,
                });
            }
        }
        if let Some(&(_, None, row)) = obs.iter().find(|(_, x, _)| x.is_none()) {
            if !impute {
                return Err(IoError::MissingValue {
                    path: path.display().to_string(),
                    row,
                    column: "x".to_string(),
                });
            }
            if obs.iter().all(|(_, x, _)| x.is_none()) {
                return Err(IoError::AllValuesMissing { id });
            }
        }
        let points: Vec<f64> = obs.iter().map(|&(t, _, _)| t).collect();
        let values = impute_gaps(&obs);
        curves.push(SubjectCurve::new(id, points, values));
    }
    Ok(curves)
}

/// Linear interpolation across `None` runs; the ends extend the nearest
/// observed value. At least one observation must be present.
fn impute_gaps(obs: &[(f64, Option<f64>, usize)]) -> Vec<f64> {
    let n = obs.len();
    let mut out = vec![f64::NAN; n];
    for (i, &(_, x, _)) in obs.iter().enumerate() {
        if let Some(v) = x {
            out[i] = v;
        }
    }
    let known: Vec<usize> = (0..n).filter(|&i| !out[i].is_nan()).collect();
    for i in 0..n {
        if !out[i].is_nan() {
            continue;
        }
        let prev = known.iter().rev().find(|&&k| k < i);
        let next = known.iter().find(|&&k| k > i);
        out[i] = match (prev, next) {
            (Some(&a), Some(&b)) => {
                let (ta, tb, t) = (obs[a].0, obs[b].0, obs[i].0);
                let w = (t - ta) / (tb - ta);
                out[a] + w * (out[b] - out[a])
            }
            (Some(&a), None) => out[a],
            (None, Some(&b)) => out[b],
            (None, None) => unreachable!("caller checked at least one observation"),
        };
    }
    out
}

/// Join the two tables into a dataset, in subject-table row order.
/// Subjects below `min_obs` observations are rejected together, with
/// their ids listed.
pub fn build_dataset(
    curves: Vec<SubjectCurve>,
    table: &SubjectTable,
    min_obs: usize,
) -> Result<VariableDomainDataset, IoError> {
    let mut by_id: HashMap<&str, &SubjectCurve> =
        curves.iter().map(|c| (c.id.as_str(), c)).collect();
    let table_ids: HashSet<&str> = table.rows.iter().map(|r| r.subject_id.as_str()).collect();
    for c in &curves {
        if !table_ids.contains(c.id.as_str()) {
            return Err(IoError::SubjectMissingFromTable { id: c.id.clone() });
        }
    }

    let mut short: Vec<&str> = Vec::new();
    let mut ordered = Vec::with_capacity(table.rows.len());
    let mut responses = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let curve = by_id.remove(row.subject_id.as_str()).ok_or_else(|| {
            IoError::SubjectMissingFromCurves {
                id: row.subject_id.clone(),
            }
        })?;
        if curve.points.len() < min_obs {
            short.push(&row.subject_id);
            continue;
        }
        ordered.push(curve.clone());
        responses.push(row.y);
    }
    if !short.is_empty() {
        return Err(IoError::TooFewObservations {
            min: min_obs,
            ids: short.join(", "),
        });
    }

    let dataset = VariableDomainDataset::with_min_observations(ordered, responses, min_obs)?;
    if table.covariate_names.is_empty() {
        return Ok(dataset);
    }
    let k = table.covariate_names.len();
    let cov = Mat::from_fn(table.rows.len(), k, |i, j| table.rows[i].covariates[j]);
    Ok(dataset.with_covariates(cov, table.covariate_names.clone())?)
}

fn make_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, IoError> {
    let file = std::fs::File::create(path).map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_io(path: &Path, source: csv::Error) -> IoError {
    IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Emit a curve table (inverse of [`read_curves`] + [`group_curves`]).
pub fn write_curves(path: &Path, curves: &[SubjectCurve]) -> Result<(), IoError> {
    let mut w = make_writer(path)?;
    w.write_record(["subject_id", "t", "x"])
        .map_err(|e| csv_io(path, e))?;
    for c in curves {
        for (t, x) in c.points.iter().zip(&c.values) {
            w.write_record([c.id.as_str(), &t.to_string(), &x.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Emit a subject table (inverse of [`read_subjects`]).
pub fn write_subjects(path: &Path, table: &SubjectTable) -> Result<(), IoError> {
    let mut w = make_writer(path)?;
    let mut header = vec!["subject_id".to_string(), "y".to_string()];
    header.extend(table.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for r in &table.rows {
        let mut record = vec![r.subject_id.clone(), r.y.to_string()];
        record.extend(r.covariates.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|source| IoError::Write {
        path: path.display().to_string(),
        source,
    })
}
