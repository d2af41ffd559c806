//! Big-endian IDX containers (the MNIST distribution format).
//!
//! Images: magic `0x00000803`, u32 count, u32 rows, u32 cols, then
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, u32
//! count, then `count` bytes. Gzipped files are detected by their magic
//! bytes and decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, LabeledDataset};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

const MNIST_CLASSES: usize = 10;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(DataError::TruncatedFile {
                offset: self.bytes.len() as u64,
                needed: (n - available) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn check_magic(cursor: &mut Cursor<'_>, expected: u32) -> Result<(), DataError> {
    let found = cursor.u32_be()?;
    if found != expected {
        return Err(DataError::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, &[u8]), DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    check_magic(&mut c, IDX_IMAGE_MAGIC)?;
    let count = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let pixels = c.take(count * rows * cols)?;
    Ok((count, rows * cols, pixels))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    check_magic(&mut c, IDX_LABEL_MAGIC)?;
    let count = c.u32_be()? as usize;
    c.take(count)
}

/// Loads an MNIST image/label file pair. Pixels are scaled by `1/255`.
pub fn load_mnist(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset, DataError> {
    let image_bytes = read_maybe_gz(images_path.as_ref())?;
    let label_bytes = read_maybe_gz(labels_path.as_ref())?;
    let (count, width, pixels) = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(features, labels, width, MNIST_CLASSES)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
