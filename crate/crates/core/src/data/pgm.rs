//! Binary PGM ("P5") grayscale images, maxval <= 255.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Load a binary P5 PGM file as a [height, width] tensor in [0,1].
/// Comment lines (`#`) after the magic are skipped.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pstr = path.display().to_string();
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic {
            format: "pgm",
            path: pstr,
            observed: bytes.iter().take(2).copied().collect(),
        });
    }

    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // Skip whitespace and comment lines.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedFile {
                format: "pgm",
                path: pstr,
                reason: "missing width/height/maxval field".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(text.parse::<usize>().map_err(|_| Error::MalformedFile {
            format: "pgm",
            path: pstr.clone(),
            reason: format!("bad header field {text:?}"),
        })?);
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval > 255 {
        return Err(Error::MalformedFile {
            format: "pgm",
            path: pstr,
            reason: format!("maxval {maxval} exceeds 255"),
        });
    }
    if maxval == 0 || width == 0 || height == 0 {
        return Err(Error::MalformedFile {
            format: "pgm",
            path: pstr,
            reason: "zero width, height, or maxval".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedFile {
            format: "pgm",
            path: pstr,
            reason: "missing separator before payload".into(),
        });
    }
    pos += 1;
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            format: "pgm",
            path: pstr,
            expected: pos + expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = payload[..expected]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Tensor::new(vec![height, width], data)
}

/// Write a [height, width] tensor in [0,1] as a binary P5 PGM with maxval 255.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "write_pgm",
            shape: shape.to_vec(),
            reason: "expected [height, width]".into(),
        });
    }
    let (height, width) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&p| (p * 255.0 + 0.5).floor() as u8));
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
