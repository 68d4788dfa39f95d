//! IDX container reader (the MNIST distribution format).
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols, then
//! `count * rows * cols` unsigned pixel bytes. Labels: magic `0x00000801`,
//! big-endian `u32` count, then one byte per label.

use std::path::Path;

use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let len = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: format!("truncated pixel data: expected {len} bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..len].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path, classes: usize) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: format!("truncated labels: expected {count}, found {}", body.len()),
        });
    }
    body[..count]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 8 + i as u64,
                    reason: format!("label {l} out of range for {classes} classes"),
                })
            }
        })
        .collect()
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_images(&bytes, path)
}

pub fn read_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&bytes, path, classes)
}

/// Serializes images in IDX layout.
pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn parses_crafted_pair() {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 0, 0, 0, 255, 255, 255, 255],
        };
        let bytes = encode_images(&images);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_images(&bytes, p()).unwrap(), images);
        assert_eq!(parse_labels(&encode_labels(&[0, 1]), p(), 10).unwrap(), vec![0, 1]);
    }

    #[test]
    fn reports_magic_truncation_and_range_offsets() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes[3] = 3;
        match parse_labels(&bytes, p(), 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }

        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![1; 8],
        };
        let bytes = encode_images(&images);
        match parse_images(&bytes[..20], p()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        match parse_images(&bytes[..6], p()) {
            Err(Error::Format { .. }) => {}
            other => panic!("{other:?}"),
        }

        match parse_labels(&encode_labels(&[1, 12, 3]), p(), 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }
}
