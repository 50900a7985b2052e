//! File formats.
//!
//! * time series: NDJSON, one `{"id": str, "Y": [[row floats]]}` per subject;
//! * precomputed covariances: NDJSON, one `{"id": str, "T": int, "S": [[...]]}`;
//! * covariates: CSV `id,x1,...,x{q1-1},w1,...,w{q2-1}`, intercepts implicit.
//!
//! Floats are written with the shortest representation that round-trips.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::serde_util::{matrix_to_rows, rows_to_matrix};

#[derive(Deserialize)]
struct SeriesLine {
    id: String,
    #[serde(rename = "Y")]
    y: Option<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    t: Option<usize>,
    #[serde(rename = "S")]
    s: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct ObservationLine<'a> {
    id: &'a str,
    #[serde(rename = "Y")]
    y: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct CovarianceLine<'a> {
    id: &'a str,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
}

enum Payload {
    Observations(Vec<Vec<f64>>),
    Covariance(usize, Vec<Vec<f64>>),
}

/// Loads a dataset from an NDJSON series file (raw `Y` or precomputed `S`/`T`
/// per line) and a covariate CSV. Subjects are ordered by id.
pub fn load_dataset(series_path: &Path, covariates_path: &Path) -> Result<Dataset> {
    let covariates = read_covariates(covariates_path)?;
    let file = File::open(series_path).map_err(|e| Error::io(series_path, e))?;
    let mut payloads: BTreeMap<String, Payload> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(series_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SeriesLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: series_path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let payload = match (parsed.y, parsed.t, parsed.s) {
            (Some(y), _, _) => Payload::Observations(y),
            (None, Some(t), Some(s)) => Payload::Covariance(t, s),
            _ => {
                return Err(Error::Parse {
                    path: series_path.to_path_buf(),
                    line: lineno + 1,
                    message: "expected either \"Y\" or both \"T\" and \"S\"".into(),
                })
            }
        };
        if payloads.insert(parsed.id.clone(), payload).is_some() {
            return Err(Error::DuplicateId(parsed.id));
        }
    }
    let mut subjects = Vec::with_capacity(payloads.len());
    for (id, payload) in payloads {
        let (x, w) = covariates
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::MissingCovariates(id.clone()))?;
        let rec = match payload {
            Payload::Observations(rows) => {
                let y = rows_to_matrix(&rows)
                    .ok_or_else(|| Error::DimensionMismatch(format!("ragged observation rows for {id}")))?;
                SubjectRecord::from_observations(id, y, x, w)?
            }
            Payload::Covariance(t, rows) => {
                let s = rows_to_matrix(&rows)
                    .ok_or_else(|| Error::DimensionMismatch(format!("ragged covariance rows for {id}")))?;
                SubjectRecord::from_covariance(id, s, t, x, w)?
            }
        };
        subjects.push(rec);
    }
    Dataset::new(subjects)
}

type CovariateMap = HashMap<String, (DVector<f64>, DVector<f64>)>;

fn read_covariates(path: &Path) -> Result<CovariateMap> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "first column must be `id`".into(),
        });
    }
    let mut x_cols = Vec::new();
    let mut w_cols = Vec::new();
    for (j, h) in headers.iter().enumerate().skip(1) {
        if h.starts_with('x') {
            x_cols.push(j);
        } else if h.starts_with('w') {
            w_cols.push(j);
        } else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unrecognised covariate column {h:?}"),
            });
        }
    }
    let mut out = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, row + 2, e))?;
        let id = record.get(0).unwrap_or_default().to_string();
        let parse = |cols: &[usize]| -> Result<DVector<f64>> {
            let mut v = vec![1.0];
            for &j in cols {
                let cell = record.get(j).unwrap_or_default();
                let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    id: id.clone(),
                    column: headers[j].to_string(),
                    value: cell.to_string(),
                })?;
                v.push(value);
            }
            Ok(DVector::from_vec(v))
        };
        let x = parse(&x_cols)?;
        let w = parse(&w_cols)?;
        if out.insert(id.clone(), (x, w)).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_timeseries(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for s in d.subjects() {
        let y = s.y.as_ref().ok_or_else(|| Error::RawDataRequired(s.id.clone()))?;
        let line = ObservationLine {
            id: &s.id,
            y: matrix_to_rows(y),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io(path, e.into()))?;
        writeln!(out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_covariances(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for s in d.subjects() {
        let line = CovarianceLine {
            id: &s.id,
            t: s.t,
            s: matrix_to_rows(&s.s),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io(path, e.into()))?;
        writeln!(out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_covariates(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((1..d.q1()).map(|j| format!("x{j}")));
    header.extend((1..d.q2()).map(|j| format!("w{j}")));
    writeln!(out, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for s in d.subjects() {
        let mut row = vec![s.id.clone()];
        row.extend(s.x.iter().skip(1).map(|v| v.to_string()));
        row.extend(s.w.iter().skip(1).map(|v| v.to_string()));
        writeln!(out, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
