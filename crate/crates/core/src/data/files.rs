//! Dataset CSV files.
//!
//! Format: header `id,label,f0,f1,...,f{D-1}`; `label` is a `;`-separated
//! list of nonnegative integers; features are decimal floats; UTF-8 with
//! `\n` newlines.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{FeatureDataset, Split};

/// Loads a feature CSV, rejecting rows with wrong arity, non-numeric
/// features, or empty label fields. Errors name the offending line.
pub fn load_csv(path: impl AsRef<Path>, split: Split) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::data(format!("cannot open dataset file {}: {e}", path.display()))
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read CSV header: {e}")))?
        .clone();
    let dim = validate_header(&headers)?;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut seen_ids = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("malformed CSV record: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} fields (id, label, {} features), found {}",
                    dim + 2,
                    dim,
                    record.len()
                ),
            });
        }
        let id: u64 = record[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("id '{}' is not a nonnegative integer", &record[0]),
        })?;
        if !seen_ids.insert(id) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate sample id {id}"),
            });
        }
        labels.push(parse_label_field(&record[1], line)?);
        let mut row = Vec::with_capacity(dim);
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature f{j} value '{field}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature f{j} is not finite"),
                });
            }
            row.push(v);
        }
        ids.push(id);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "dataset file {} has no samples",
            path.display()
        )));
    }
    FeatureDataset::new(ids, Matrix::from_rows(&rows)?, labels, split)
}

fn validate_header(headers: &csv::StringRecord) -> Result<usize> {
    let fields: Vec<&str> = headers.iter().collect();
    if fields.len() < 3 || fields[0] != "id" || fields[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must be 'id,label,f0,f1,...'".to_string(),
        });
    }
    for (j, f) in fields[2..].iter().enumerate() {
        if *f != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {} must be named f{j}, found '{f}'", j + 2),
            });
        }
    }
    Ok(fields.len() - 2)
}

fn parse_label_field(field: &str, line: u64) -> Result<Vec<u32>> {
    let field = field.trim();
    if field.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty label field".to_string(),
        });
    }
    field
        .split(';')
        .map(|part| {
            part.trim().parse::<u32>().map_err(|_| Error::Parse {
                line,
                message: format!("label '{part}' is not a nonnegative integer"),
            })
        })
        .collect()
}

/// Writes a dataset in the CSV format `load_csv` reads.
pub fn save_csv(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::data(format!("cannot create CSV file: {e}")))?;

    let dim = dataset.dim();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::data(format!("CSV write failed: {e}")))?;

    for i in 0..dataset.len() {
        let label = dataset
            .label_set(i)
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let mut record = vec![dataset.ids()[i].to_string(), label];
        record.extend(dataset.features().row(i).iter().map(|v| v.to_string()));
        writer
            .write_record(&record)
            .map_err(|e| Error::data(format!("CSV write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::data(format!("CSV flush failed: {e}")))?;
    Ok(())
}
