//! IDX image/label files, raw or gzip-compressed.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: header truncated at byte {offset} (file is {} bytes)",
                path.display(),
                bytes.len()
            ))
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::Data(format!(
            "{}: bad magic 0x{got:08x} at byte 0, expected 0x{want:08x}",
            path.display()
        )));
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(())
}

/// Loads an image file and a label file. Pixels are scaled to [0, 1] and
/// then standardized; `num_classes` defaults to the largest label + 1.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = read_bytes(ip)?;
    let lab = read_bytes(lp)?;
    check_magic(&img, IMAGES_MAGIC, ip)?;
    check_magic(&lab, LABELS_MAGIC, lp)?;
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let nl = be_u32(&lab, 4, lp)? as usize;
    if n != nl {
        return Err(Error::Data(format!(
            "count mismatch: {} declares {n} images at byte 4, {} declares {nl} labels at byte 4",
            ip.display(),
            lp.display()
        )));
    }
    check_len(&img, 16 + n * rows * cols, ip)?;
    check_len(&lab, 8 + n, lp)?;
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let k = match num_classes {
        Some(k) => {
            if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= k) {
                return Err(Error::Data(format!(
                    "{}: label {l} at byte {} exceeds the declared {k} classes",
                    lp.display(),
                    8 + i
                )));
            }
            k
        }
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let pixels = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let mut d = Dataset::new(
        pixels,
        [1, rows, cols],
        labels,
        k,
        Provenance {
            source: format!("idx:{}", ip.display()),
            ..Provenance::default()
        },
    )?;
    d.standardize();
    Ok(d)
}

/// Writes raw (uncompressed) IDX files from 8-bit pixels.
pub fn write_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    label_bytes: &[u8],
) -> Result<()> {
    let n = label_bytes.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "{} pixels for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(images)?;
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    let mut f = std::fs::File::create(labels)?;
    for v in [LABELS_MAGIC, n as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(label_bytes)?;
    Ok(())
}
