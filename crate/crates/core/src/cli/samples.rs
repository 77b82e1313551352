//! Sample files: one observation per row, one column per coordinate, with an
//! optional header row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::space::Point;

/// Parses sample CSV text. `name` labels diagnostics.
pub fn parse_samples(text: &str, name: &str) -> Result<Vec<Point>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    let mut dim = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::invalid(format!("{name}: row {row}: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(|v| v.is_err()) {
            continue;
        }
        let mut coords = Vec::with_capacity(parsed.len());
        for (j, v) in parsed.into_iter().enumerate() {
            let col = j + 1;
            match v {
                Ok(x) if x.is_finite() => coords.push(x),
                _ => {
                    return Err(Error::invalid(format!(
                        "{name}: row {row}, column {col}: {:?} is not a finite number",
                        &record[j]
                    )))
                }
            }
        }
        match dim {
            None => dim = Some(coords.len()),
            Some(d) if d != coords.len() => {
                return Err(Error::invalid(format!(
                    "{name}: row {row} has {} columns, expected {d}",
                    coords.len()
                )))
            }
            _ => {}
        }
        points.push(Point::new(coords)?);
    }
    if points.is_empty() {
        return Err(Error::invalid(format!("{name}: no observations")));
    }
    Ok(points)
}

pub fn read_samples(path: &Path) -> Result<Vec<Point>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    parse_samples(&text, &path.display().to_string())
}

/// Reads a file of scalar observations.
pub fn read_scalars(path: &Path) -> Result<Vec<f64>> {
    let points = read_samples(path)?;
    if points[0].dim() != 1 {
        return Err(Error::invalid(format!(
            "{}: expected one column, found {}",
            path.display(),
            points[0].dim()
        )));
    }
    Ok(points.iter().map(|p| p.coords()[0]).collect())
}
