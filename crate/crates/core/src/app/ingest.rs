//! CSV ingestion of experimental data and feature collapsing.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{Error, Result};

/// At most this many offending lines are listed in an ingest error.
const MAX_REPORTED: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    pub propensity: f64,
}

impl CsvSchema {
    /// Columns `f0..f11`, `treatment` and `visit` with a 0.85 treated share.
    pub fn uplift_default() -> Self {
        CsvSchema {
            features: (0..12).map(|i| format!("f{i}")).collect(),
            treatment: "treatment".into(),
            outcome: "visit".into(),
            propensity: 0.85,
        }
    }
}

/// A dataset together with its feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedDataset {
    pub names: Vec<String>,
    pub data: Dataset,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<NamedDataset> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, schema).map_err(|e| match e {
        Error::Ingest(m) => Error::Ingest(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn ingest_reader<R: Read>(input: R, schema: &CsvSchema) -> Result<NamedDataset> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest(format!("missing column `{name}`")))
    };
    let feature_idx = schema.features.iter().map(|f| column(f)).collect::<Result<Vec<_>>>()?;
    let treat_idx = column(&schema.treatment)?;
    let out_idx = column(&schema.outcome)?;

    let mut covariates = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    let mut problem_count = 0;
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let mut fail = |msg: String| {
            problem_count += 1;
            if problems.len() < MAX_REPORTED {
                problems.push(format!("line {line}: {msg}"));
            }
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                fail(e.to_string());
                continue;
            }
        };
        let num = |j: usize| -> std::result::Result<f64, String> {
            let raw = record.get(j).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("column `{}`: cannot parse `{raw}`", &headers[j]))
        };
        let row: std::result::Result<Vec<f64>, String> = feature_idx.iter().map(|&j| num(j)).collect();
        let w = match record.get(treat_idx).map(str::trim) {
            Some("0") => Ok(false),
            Some("1") => Ok(true),
            other => Err(format!("treatment must be 0 or 1, got `{}`", other.unwrap_or(""))),
        };
        match (row, w, num(out_idx)) {
            (Ok(x), Ok(w), Ok(y)) => {
                covariates.push(x);
                treatment.push(w);
                outcome.push(y);
            }
            (x, w, y) => {
                let msgs: Vec<String> = [x.err(), w.err(), y.err()].into_iter().flatten().collect();
                fail(msgs.join("; "));
            }
        }
    }
    if problem_count > 0 {
        let more = if problem_count > problems.len() {
            format!("\n... and {} more", problem_count - problems.len())
        } else {
            String::new()
        };
        return Err(Error::Ingest(format!("{problem_count} malformed rows:\n{}{more}", problems.join("\n"))));
    }
    if covariates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = Dataset::new(covariates, treatment, outcome, schema.propensity)?;
    Ok(NamedDataset { names: schema.features.clone(), data })
}

/// Keeps the listed features and, with `sum_rest`, appends the sum of all
/// other features as a final column named `sum_rest`.
pub fn collapse_features(input: &NamedDataset, keep: &[String], sum_rest: bool) -> Result<NamedDataset> {
    if keep.is_empty() && !sum_rest {
        return Err(Error::InvalidConfig("collapse needs kept features or sum_rest".into()));
    }
    let idx = keep
        .iter()
        .map(|k| {
            input.names.iter().position(|n| n == k).ok_or_else(|| Error::InvalidConfig(format!("unknown feature `{k}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let rest: Vec<usize> = (0..input.names.len()).filter(|i| !idx.contains(i)).collect();
    let covariates = input
        .data
        .covariates()
        .iter()
        .map(|x| {
            let mut row: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            if sum_rest {
                row.push(rest.iter().map(|&i| x[i]).sum());
            }
            row
        })
        .collect();
    let mut names = keep.to_vec();
    if sum_rest {
        names.push("sum_rest".into());
    }
    Ok(NamedDataset { names, data: input.data.with_covariates(covariates)? })
}

/// Writes the dataset back in the schema's column layout.
pub fn write_csv<W: Write>(input: &NamedDataset, schema: &CsvSchema, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = input.names.clone();
    header.push(schema.treatment.clone());
    header.push(schema.outcome.clone());
    w.write_record(&header)?;
    let d = &input.data;
    for ((x, &t), y) in d.covariates().iter().zip(d.treatment()).zip(d.outcome()) {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.push(u8::from(t).to_string());
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
