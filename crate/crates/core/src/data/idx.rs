//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{}: header", what.display())))
}

/// Raw image bytes with `(count, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::WrongMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "{}: {} pixel bytes, header declares {need}",
            path.display(),
            body.len()
        )));
    }
    Ok((body[..need].to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::WrongMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("{}: {} labels, header declares {n}", path.display(), body.len())));
    }
    Ok(body[..n].to_vec())
}

/// Images as `[n, 1, rows, cols]` scaled by `1/255`, with labels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset<f64>> {
    let (pixels, n, rows, cols) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("IDX file declares an empty dataset".into()));
    }
    let x = Tensor::new([n, 1, rows, cols], pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = y.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(x, y, None, classes)
}

/// Values in `[0, 1]` back to bytes (`round(255 v)`).
pub fn encode_pixels<T: Real>(x: &Tensor<T>) -> Vec<u8> {
    x.data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::shape("write_idx_images", format!("{} bytes for {n}x{rows}x{cols}", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write(path, &out)
}
