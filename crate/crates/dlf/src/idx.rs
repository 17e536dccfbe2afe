//! Reader for the big-endian IDX format used by the MNIST distribution
//! files.

use std::path::Path;

use dlf_core::Tensor;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::format(
                "idx",
                format!("byte {offset}: file ends before {what} (length {})", bytes.len()),
            )
        })
}

fn check_len(bytes: &[u8], header: usize, count: usize) -> Result<()> {
    let expected = header + count;
    if bytes.len() != expected {
        return Err(Error::format(
            "idx",
            format!("byte {header}: expected {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    Ok(())
}

/// Images as `[N, H, W, 1]` with integer pixel values.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format("idx", format!("byte 0: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let h = be_u32(bytes, 8, "row count")? as usize;
    let w = be_u32(bytes, 12, "column count")? as usize;
    check_len(bytes, 16, n * h * w)?;
    Tensor::new(&[n, h, w, 1], bytes[16..].iter().map(|&b| b as f64).collect())
        .map_err(|e| Error::format("idx", e.to_string()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format("idx", format!("byte 0: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    check_len(bytes, 8, n)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_images(path: &Path) -> Result<Tensor> {
    parse_images(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&read(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { section, detail } => Error::format(section, format!("{}: {detail}", path.display())),
        other => other,
    }
}

/// Serializes images (`[N, H, W, 1]`, integer values) as IDX bytes.
pub fn encode_images(x: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + x.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for &d in &x.shape()[..3] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(x.data().iter().map(|&v| v as u8));
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_gives_shape() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend(std::iter::repeat_n(7u8, 2 * 28 * 28));
        let t = parse_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 28, 28, 1]);
        assert!(t.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn truncation_names_lengths() {
        let mut bytes = encode_images(&Tensor::zeros(&[3, 4, 4, 1]));
        bytes.truncate(40);
        let err = parse_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected 64") && err.contains("found 40"), "{err}");
        assert!(parse_images(&bytes[..10]).is_err());
    }

    #[test]
    fn labels_and_bad_magic() {
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(parse_labels(&encode_labels(&labels)).unwrap(), labels);
        assert!(parse_images(&encode_labels(&labels)).is_err());
    }
}
