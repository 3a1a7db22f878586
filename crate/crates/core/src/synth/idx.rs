//! MNIST IDX container: big-endian header followed by raw bytes.

use std::fs;
use std::path::Path;

use super::glyph::{DigitPool, Glyph, GLYPH_SIDE};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("slice of 4")))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into 28x28 bitmaps. `path` is only used for
/// error messages.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<Glyph>> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    if rows != GLYPH_SIDE || cols != GLYPH_SIDE {
        return Err(Error::BadDimensions {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let len = rows * cols;
    let needed = 16 + count * len;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    bytes[16..needed]
        .chunks_exact(len)
        .map(|c| Glyph::new(c.to_vec()))
        .collect()
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Loads an IDX image/label file pair and groups bitmaps by label.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<DigitPool> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_images(&img_bytes, images_path)?;
    let labels = parse_labels(&lbl_bytes, labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            path: labels_path.to_path_buf(),
            expected: images.len(),
            found: labels.len(),
        });
    }
    DigitPool::from_labeled(labels.into_iter().zip(images))
}

pub fn encode_images(glyphs: &[Glyph]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + glyphs.len() * GLYPH_SIDE * GLYPH_SIDE);
    for v in [IMAGES_MAGIC, glyphs.len() as u32, GLYPH_SIDE as u32, GLYPH_SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for g in glyphs {
        out.extend_from_slice(g.pixels());
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
