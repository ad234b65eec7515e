//! IDX binary format (big-endian headers, u8 payload).
//!
//! Image files carry magic 0x00000803 (u8 elements, 3 dimensions), label
//! files 0x00000801. Headers are validated before the payload is touched;
//! pixels map [0,255] -> [0,1] by division by 255.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGE_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x03];
const LABEL_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x01];

fn read_file(path: &Path, format: &'static str, min_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < min_len {
        return Err(Error::Truncated {
            format,
            path: path.display().to_string(),
            expected: min_len,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

/// Load an IDX image file as a list of [rows, cols] tensors in [0,1].
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = read_file(path, "idx-images", 16)?;
    if bytes[..4] != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            format: "idx-images",
            path: path.display().to_string(),
            observed: bytes[..4].to_vec(),
        });
    }
    let count = read_u32_be(&bytes, 4) as usize;
    let rows = read_u32_be(&bytes, 8) as usize;
    let cols = read_u32_be(&bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            format: "idx-images",
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data: Vec<f64> = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::new(vec![rows, cols], data)?);
    }
    Ok(images)
}

/// Load an IDX label file.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_file(path, "idx-labels", 8)?;
    if bytes[..4] != LABEL_MAGIC {
        return Err(Error::BadMagic {
            format: "idx-labels",
            path: path.display().to_string(),
            observed: bytes[..4].to_vec(),
        });
    }
    let count = read_u32_be(&bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            format: "idx-labels",
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Write images to an IDX file. Pixels are quantized with round-half-up to
/// [0,255] bytes; all images must share one [rows, cols] shape.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to write".into()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "write_idx_images",
            shape,
            reason: "expected [rows, cols] images".into(),
        });
    }
    let mut bytes = Vec::with_capacity(16 + images.len() * images[0].numel());
    bytes.extend_from_slice(&IMAGE_MAGIC);
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[0] as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[1] as u32).to_be_bytes());
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "write_idx_images",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        bytes.extend(img.data().iter().map(|&p| (p * 255.0 + 0.5).floor() as u8));
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write labels to an IDX file. Labels must fit in a byte.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC);
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::InvalidArgument(format!("label {l} exceeds u8")));
        }
        bytes.push(l as u8);
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
