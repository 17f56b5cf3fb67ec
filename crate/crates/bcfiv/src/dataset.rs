//! Data model, CSV ingestion and honest sample splitting.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// Aligned outcome / treatment-receipt / instrument columns plus a row-major
/// covariate matrix. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub w: Vec<u8>,
    pub z: Vec<u8>,
    x: Vec<f64>, // row-major, n * p
    pub covariate_names: Vec<String>,
    pub outcome_kind: OutcomeKind,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        w: Vec<u8>,
        z: Vec<u8>,
        x: Vec<f64>,
        covariate_names: Vec<String>,
        outcome_kind: Option<OutcomeKind>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Size("dataset must contain at least one row".into()));
        }
        let p = covariate_names.len();
        if w.len() != n || z.len() != n || x.len() != n * p {
            return Err(Error::Domain(format!(
                "column lengths disagree: y={}, w={}, z={}, x={} (expected {}x{})",
                n,
                w.len(),
                z.len(),
                x.len(),
                n,
                p
            )));
        }
        for (i, &v) in w.iter().enumerate() {
            if v > 1 {
                return Err(Error::Domain(format!(
                    "treatment column contains value {} at row {} (must be 0/1)",
                    v, i
                )));
            }
        }
        for (i, &v) in z.iter().enumerate() {
            if v > 1 {
                return Err(Error::Domain(format!(
                    "instrument column contains value {} at row {} (must be 0/1)",
                    v, i
                )));
            }
        }
        {
            let mut sorted: Vec<&String> = covariate_names.iter().collect();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != p {
                return Err(Error::Schema("covariate names must be distinct".into()));
            }
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite value in data".into()));
        }
        let kind = match outcome_kind {
            Some(k) => k,
            None => {
                if y.iter().all(|&v| v == 0.0 || v == 1.0) {
                    OutcomeKind::Binary
                } else {
                    OutcomeKind::Continuous
                }
            }
        };
        if kind == OutcomeKind::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(
                "binary outcome contains values outside {0,1}".into(),
            ));
        }
        Ok(Dataset {
            y,
            w,
            z,
            x,
            covariate_names,
            outcome_kind: kind,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// Covariate row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    /// The full row-major covariate matrix.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Column `j` of the covariate matrix, copied out.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.row(i)[j]).collect()
    }

    /// Subset of rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let p = self.p();
        let mut x = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            z: rows.iter().map(|&i| self.z[i]).collect(),
            x,
            covariate_names: self.covariate_names.clone(),
            outcome_kind: self.outcome_kind,
        }
    }
}

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub covariates: Vec<String>,
    /// Overrides outcome-kind auto-detection when set.
    pub outcome_kind: Option<OutcomeKind>,
}

/// Read a comma-separated, UTF-8, header-row CSV. Missing values are a hard
/// error; "." is the decimal separator.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {}", path.display(), e)))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {}", e)))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{}'", name)))
    };
    if schema.covariates.is_empty() {
        return Err(Error::Schema("schema names no covariate columns".into()));
    }
    let yi = col_index(&schema.outcome)?;
    let wi = col_index(&schema.treatment)?;
    let zi = col_index(&schema.instrument)?;
    let xi: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let parse = |field: &str, row: usize, column: &str| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-numeric cell '{}'", field),
        })
    };
    let parse_bin = |v: f64, row: usize, column: &str| -> Result<u8> {
        if v == 0.0 {
            Ok(0)
        } else if v == 1.0 {
            Ok(1)
        } else {
            Err(Error::Domain(format!(
                "column '{}' has value {} at row {} (must be 0/1)",
                column, v, row
            )))
        }
    };

    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut z = Vec::new();
    let mut x = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row_idx,
            column: String::new(),
            message: e.to_string(),
        })?;
        let get = |i: usize, name: &str| -> Result<f64> {
            let field = record.get(i).ok_or_else(|| Error::Parse {
                row: row_idx,
                column: name.to_string(),
                message: "missing field".into(),
            })?;
            if field.trim().is_empty() {
                return Err(Error::Parse {
                    row: row_idx,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            parse(field, row_idx, name)
        };
        y.push(get(yi, &schema.outcome)?);
        w.push(parse_bin(get(wi, &schema.treatment)?, row_idx, &schema.treatment)?);
        z.push(parse_bin(get(zi, &schema.instrument)?, row_idx, &schema.instrument)?);
        for (&ci, name) in xi.iter().zip(&schema.covariates) {
            x.push(get(ci, name)?);
        }
    }
    Dataset::new(y, w, z, x, schema.covariates.clone(), schema.outcome_kind)
}

/// Disjoint, exhaustive discovery/inference partition produced by a seeded
/// permutation.
#[derive(Debug, Clone)]
pub struct HonestSplit {
    pub discovery: Dataset,
    pub inference: Dataset,
    pub discovery_rows: Vec<usize>,
    pub inference_rows: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Round half to even.
fn round_half_even(v: f64) -> usize {
    let floor = v.floor();
    let frac = v - floor;
    if (frac - 0.5).abs() < 1e-12 {
        let f = floor as usize;
        if f % 2 == 0 {
            f
        } else {
            f + 1
        }
    } else {
        v.round() as usize
    }
}

/// Assign rows to discovery and inference subsamples by seeded uniform
/// permutation. No stratification on instrument or treatment.
pub fn honest_split(d: &Dataset, ratio: f64, seed: u64) -> Result<HonestSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "split ratio must lie in (0,1), got {}",
            ratio
        )));
    }
    let n = d.n();
    if n < 2 {
        return Err(Error::Size("honest split needs at least 2 rows".into()));
    }
    let n_dis = round_half_even(ratio * n as f64).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, 0x5350_4c49); // "SPLI"
    perm.shuffle(&mut rng);
    let mut discovery_rows = perm[..n_dis].to_vec();
    let mut inference_rows = perm[n_dis..].to_vec();
    discovery_rows.sort_unstable();
    inference_rows.sort_unstable();
    Ok(HonestSplit {
        discovery: d.subset(&discovery_rows),
        inference: d.subset(&inference_rows),
        discovery_rows,
        inference_rows,
        ratio,
        seed,
    })
}
