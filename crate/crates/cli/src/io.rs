//! CSV helpers shared by the commands.

use std::path::Path;

use deme_core::Tensor;

use crate::error::{CliError, Result};

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Csv { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes a header row followed by `rows`, formatting floats with `{}` so
/// values round-trip exactly.
pub fn write_table<R, I>(path: &Path, header: &[String], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Writes samples as `x1,...,xd` rows.
pub fn write_samples(path: &Path, samples: &Tensor) -> Result<()> {
    let d = samples.cols();
    let names: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    write_table(path, &names, (0..samples.rows()).map(|i| samples.row(i).iter().map(f64::to_string).collect::<Vec<_>>()))
}

/// Reads a numeric CSV with a header row into an `n x d` tensor.
pub fn read_samples(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let width = r.headers().map_err(|e| csv_err(path, e))?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| csv_err(path, format!("row {}: `{field}` is not a number", i + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Tensor::new(vec![rows, width], data)?)
}
