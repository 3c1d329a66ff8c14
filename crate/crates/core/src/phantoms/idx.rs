//! IDX containers as used by MNIST: big-endian magic and dimensions followed
//! by unsigned bytes.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Format(format!("IDX magic: expected {expected:#010x}, found {found:#010x}")));
    }
    Ok(())
}

/// `(n, rows, cols)` image stack.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array3<u8>> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Format(format!("IDX payload is {} bytes, dims need {need}", payload.len())));
    }
    Ok(Array3::from_shape_vec((n, rows, cols), payload.to_vec()).expect("length checked"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!("IDX payload is {} bytes, header declares {n}", payload.len())));
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(images: &Array3<u8>) -> Vec<u8> {
    let (n, r, c) = images.dim();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, r as u32, c as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.iter().copied());
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let path = path.as_ref();
    parse_idx_images(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn minimal_image_file() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[10, 20, 30, 40]);
        let img = parse_idx_images(&bytes).unwrap();
        assert_eq!(img.dim(), (1, 2, 2));
        assert_eq!(img[[0, 0, 1]], 20);
        assert_eq!(img[[0, 1, 0]], 30);
    }

    #[test]
    fn wrong_magic_names_both_values() {
        let bytes = write_idx_labels(&[1, 2, 3]);
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        let mut short = write_idx_images(&Array3::zeros((2, 3, 3)));
        short.pop();
        assert!(parse_idx_images(&short).is_err());
    }

    #[test]
    fn random_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let imgs = Array3::from_shape_simple_fn((10, 28, 28), || rng.random::<u8>());
        assert_eq!(parse_idx_images(&write_idx_images(&imgs)).unwrap(), imgs);
        let labels: Vec<u8> = (0..10).map(|_| rng.random_range(0..10)).collect();
        assert_eq!(parse_idx_labels(&write_idx_labels(&labels)).unwrap(), labels);
    }
}
