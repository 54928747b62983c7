//! IDX (MNIST) image/label file pairs.
//!
//! Layout, all integers big-endian `u32`:
//! images: magic `0x00000803`, count, rows, cols, then `count*rows*cols` bytes;
//! labels: magic `0x00000801`, count, then `count` bytes.
//! Pixels are scaled to `[0, 1]` and images flattened row-major.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use super::Dataset;
use crate::distributions::ClassId;
use crate::matrix::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxFile {
    Images,
    Labels,
}

impl std::fmt::Display for IdxFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IdxFile::Images => "image file",
            IdxFile::Labels => "label file",
        })
    }
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{file}: bad magic at offset 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { file: IdxFile, expected: u32, found: u32 },
    #[error("{file}: truncated at offset {offset}: need {needed} bytes, file has {available}")]
    Truncated {
        file: IdxFile,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels} (offset 4 in both files)")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn read_u32(bytes: &[u8], offset: usize, file: IdxFile) -> Result<u32, IdxError> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(IdxError::Truncated {
            file,
            offset: bytes.len(),
            needed: offset + 4,
            available: bytes.len(),
        }),
    }
}

fn payload(bytes: &[u8], header: usize, len: Option<usize>, file: IdxFile) -> Result<&[u8], IdxError> {
    let end = len.and_then(|l| l.checked_add(header));
    match end {
        Some(end) if end <= bytes.len() => Ok(&bytes[header..end]),
        _ => Err(IdxError::Truncated {
            file,
            offset: bytes.len(),
            needed: end.unwrap_or(usize::MAX),
            available: bytes.len(),
        }),
    }
}

/// Parses an image/label pair. Never panics; every failure is an [`IdxError`].
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, IdxError> {
    let magic = read_u32(images, 0, IdxFile::Images)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            file: IdxFile::Images,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let magic = read_u32(labels, 0, IdxFile::Labels)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            file: IdxFile::Labels,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(images, 4, IdxFile::Images)? as usize;
    let rows = read_u32(images, 8, IdxFile::Images)? as usize;
    let cols = read_u32(images, 12, IdxFile::Images)? as usize;
    let label_count = read_u32(labels, 4, IdxFile::Labels)? as usize;
    if count != label_count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let pixels_per_image = rows.checked_mul(cols);
    let pixel_bytes = payload(
        images,
        16,
        pixels_per_image.and_then(|p| p.checked_mul(count)),
        IdxFile::Images,
    )?;
    let label_bytes = payload(labels, 8, Some(count), IdxFile::Labels)?;

    let dim = rows * cols;
    let data = pixel_bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let samples = Matrix::from_vec(count, dim, data).expect("payload length checked");
    let labels = label_bytes.iter().map(|&b| ClassId(u32::from(b))).collect();
    Ok(Dataset::new(samples, labels, "idx").expect("counts checked"))
}

/// Reads a file, gunzipping when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let mut ds = parse_idx(&read_maybe_gz(images)?, &read_maybe_gz(labels)?)?;
    ds.provenance = images.display().to_string();
    Ok(ds)
}

/// Encodes a dataset back into IDX bytes (pixels are re-quantized to `u8`).
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IMAGE_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.samples.as_slice().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|l| l.0 as u8));
    (img, lab)
}
