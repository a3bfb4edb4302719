//! `label,pixel,...,pixel` rows of square single-channel images.

use std::path::Path;

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};

/// Reads one image per row; a non-numeric first row is treated as a header.
/// Pixels are standardized after loading.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let Some(first) = rec.get(0) else { continue };
        let label: usize = match first.trim().parse() {
            Ok(l) => l,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "{}: line {}: bad label `{first}`",
                    path.display(),
                    line + 1
                )))
            }
        };
        let n = rec.len() - 1;
        if *width.get_or_insert(n) != n {
            return Err(Error::Data(format!(
                "{}: line {}: {n} pixels, earlier rows have {}",
                path.display(),
                line + 1,
                width.unwrap_or(0)
            )));
        }
        for field in rec.iter().skip(1) {
            pixels.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad pixel `{field}`",
                    path.display(),
                    line + 1
                ))
            })?);
        }
        labels.push(label);
    }
    let n = width.ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::Data(format!(
            "{}: {n} pixels per row is not a square image",
            path.display()
        )));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut d = Dataset::new(
        pixels,
        [1, side, side],
        labels,
        k,
        Provenance {
            source: format!("csv:{}", path.display()),
            ..Provenance::default()
        },
    )?;
    d.standardize();
    Ok(d)
}
