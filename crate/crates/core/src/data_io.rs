//! CSV ingestion and export of labeled datasets.
//!
//! Files carry a header row. One column holds the group label (any string);
//! every other column, or a named subset, must be numeric.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{MgqdaError, Result};
use crate::scalar::Scalar;
use crate::stats::Dataset;

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(MgqdaError::invalid("CSV file has no header"));
    }
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Table { header, rows })
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| MgqdaError::invalid(format!("column '{name}' not found in header")))
}

fn parse_matrix<T: Scalar>(table: &Table, cols: &[usize]) -> Result<Array2<T>> {
    let mut x = Array2::zeros((table.rows.len(), cols.len()));
    for (i, rec) in table.rows.iter().enumerate() {
        for (k, &c) in cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| {
                MgqdaError::invalid(format!("row {}, column '{}': '{raw}' is not a number", i + 1, table.header[c]))
            })?;
            x[[i, k]] = T::of(v);
        }
    }
    Ok(x)
}

fn feature_columns(header: &[String], exclude: Option<usize>, features: Option<&[String]>) -> Result<Vec<usize>> {
    match features {
        Some(names) => names
            .iter()
            .map(|n| {
                let c = column_index(header, n)?;
                if Some(c) == exclude {
                    return Err(MgqdaError::invalid(format!("'{n}' is the label column")));
                }
                Ok(c)
            })
            .collect(),
        None => Ok((0..header.len()).filter(|&c| Some(c) != exclude).collect()),
    }
}

/// Reads a labeled dataset. Labels map to groups by first appearance; the
/// feature columns are all other columns in file order, or `features`.
pub fn read_labeled<T: Scalar, R: Read>(reader: R, label_col: &str, features: Option<&[String]>) -> Result<Dataset<T>> {
    let table = read_table(reader)?;
    let label_idx = column_index(&table.header, label_col)?;
    let cols = feature_columns(&table.header, Some(label_idx), features)?;
    if cols.is_empty() {
        return Err(MgqdaError::invalid("no feature columns"));
    }
    let x = parse_matrix(&table, &cols)?;
    let raw: Vec<&str> = table.rows.iter().map(|r| r.get(label_idx).unwrap_or("")).collect();
    let names = cols.iter().map(|&c| table.header[c].clone()).collect();
    Dataset::from_raw_labels(x, &raw, Some(names))
}

pub fn read_labeled_path<T: Scalar>(path: impl AsRef<Path>, label_col: &str, features: Option<&[String]>) -> Result<Dataset<T>> {
    read_labeled(File::open(path)?, label_col, features)
}

/// Reads an unlabeled feature matrix. With `names`, those columns are
/// selected by header name (others are ignored); otherwise every column is a
/// feature.
pub fn read_features<T: Scalar, R: Read>(reader: R, names: Option<&[String]>) -> Result<Array2<T>> {
    let table = read_table(reader)?;
    let cols = feature_columns(&table.header, None, names)?;
    parse_matrix(&table, &cols)
}

pub fn read_features_path<T: Scalar>(path: impl AsRef<Path>, names: Option<&[String]>) -> Result<Array2<T>> {
    read_features(File::open(path)?, names)
}

/// Writes the features followed by a label column. Values use the shortest
/// representation that reads back to the same number.
pub fn write_labeled<T: Scalar, W: Write>(writer: W, data: &Dataset<T>, label_col: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (1..=data.p()).map(|j| format!("x{j}")).collect(),
    };
    header.push(label_col.to_string());
    w.write_record(&header)?;
    for (row, &g) in data.x().outer_iter().zip(data.groups()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.as_f64().to_string()).collect();
        rec.push(data.labels()[g].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
