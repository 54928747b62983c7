//! CSV tables of the form `id,label,z0,...,z{d-1}`.
//!
//! The same layout serves exported embeddings and precomputed feature files.

use std::path::Path;

use super::{write_atomic, DataError, Dataset};
use crate::distributions::ClassId;
use crate::error::ShapeError;
use crate::matrix::Matrix;

pub fn to_csv_bytes(ids: &[usize], labels: &[ClassId], rows: &Matrix) -> Result<Vec<u8>, DataError> {
    if ids.len() != rows.rows() || labels.len() != rows.rows() {
        return Err(ShapeError::new("csv rows", rows.rows(), ids.len().min(labels.len())).into());
    }
    let mut w = ::csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..rows.cols()).map(|j| format!("z{j}")));
    let fmt_err = |e: ::csv::Error| DataError::Config(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(fmt_err)?;
    for (i, row) in rows.iter_rows().enumerate() {
        let mut rec = vec![ids[i].to_string(), labels[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(fmt_err)?;
    }
    w.into_inner()
        .map_err(|e| DataError::Config(format!("csv encoding failed: {e}")))
}

pub fn write_table(path: &Path, ids: &[usize], labels: &[ClassId], rows: &Matrix) -> Result<(), DataError> {
    write_atomic(path, &to_csv_bytes(ids, labels, rows)?)
}

pub fn parse_table(bytes: &[u8], source: &Path) -> Result<Dataset, DataError> {
    let format = |message: String| DataError::Format {
        path: source.to_path_buf(),
        message,
    };
    let mut r = ::csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| format(e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(format("header must start with `id,label` followed by feature columns".into()));
    }
    let dim = header.len() - 2;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format(e.to_string()))?;
        let at = |what: &str| format(format!("row {}: bad {what}", line + 1));
        ids.push(rec[0].trim().parse::<usize>().map_err(|_| at("id"))?);
        labels.push(ClassId(rec[1].trim().parse::<u32>().map_err(|_| at("label"))?));
        for field in rec.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| at("feature"))?;
            if !v.is_finite() {
                return Err(at("feature"));
            }
            data.push(v);
        }
    }
    let samples = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::with_ids(samples, labels, ids, source.display().to_string())
}

pub fn read_table(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_table(&bytes, path)
}
