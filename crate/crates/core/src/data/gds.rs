//! GDS1: a flat container for captured gradients.
//!
//! ```text
//! offset  size        field
//! 0       4           ASCII "GDS1"
//! 4       4           u32 LE  d
//! 8       8           u64 LE  count
//! 16      8*count*d   f64 LE  rows, row-major
//! ..      4           u32 LE  metadata length n
//! ..      n           UTF-8 JSON metadata
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const GDS_MAGIC: &[u8; 4] = b"GDS1";

/// Provenance stored alongside the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMetadata {
    pub source_model: String,
    pub clip: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientDataset {
    dim: usize,
    rows: Vec<f64>,
    pub metadata: GradientMetadata,
}

impl GradientDataset {
    pub fn new(dim: usize, rows: Vec<f64>, metadata: GradientMetadata) -> Result<Self, DataError> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(DataError::Invalid(format!(
                "{} values do not form a non-empty set of rows of width {dim}",
                rows.len()
            )));
        }
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite value in row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { dim, rows, metadata })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }
}

pub fn save_gradients(ds: &GradientDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GDS_MAGIC)?;
    w.write_all(&(ds.dim as u32).to_le_bytes())?;
    w.write_all(&(ds.count() as u64).to_le_bytes())?;
    for v in &ds.rows {
        w.write_all(&v.to_le_bytes())?;
    }
    let meta = serde_json::to_string(&ds.metadata)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), DataError> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(DataError::TruncatedFile {
                        offset: self.offset + done as u64,
                        needed: (buf.len() - done) as u64,
                    })
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }
}

pub fn load_gradients(path: impl AsRef<Path>) -> Result<GradientDataset, DataError> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic: [u8; 4] = r.array()?;
    if &magic != GDS_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(GDS_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let dim = u32::from_le_bytes(r.array()?) as usize;
    let count = u64::from_le_bytes(r.array()?) as usize;
    let total = dim
        .checked_mul(count)
        .ok_or_else(|| DataError::Invalid(format!("{count} rows of width {dim} overflow")))?;
    let mut rows = Vec::with_capacity(total.min(1 << 28));
    for _ in 0..total {
        rows.push(f64::from_le_bytes(r.array()?));
    }
    let meta_len = u32::from_le_bytes(r.array()?) as usize;
    let mut meta = vec![0u8; meta_len];
    r.fill(&mut meta)?;
    let metadata: GradientMetadata = serde_json::from_slice(&meta)?;
    GradientDataset::new(dim, rows, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> GradientMetadata {
        let mut extra = BTreeMap::new();
        extra.insert("epochs".to_string(), serde_json::json!(2));
        GradientMetadata {
            source_model: "logistic-regression".into(),
            clip: 0.1,
            seed: 42,
            extra,
        }
    }

    fn sample() -> GradientDataset {
        let rows = (0..12).map(|i| (i as f64 - 5.5) * 0.1f64.powi(i)).collect();
        GradientDataset::new(4, rows, meta()).unwrap()
    }

    #[test]
    fn round_trip_3x4() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.gds");
        let ds = sample();
        save_gradients(&ds, &p).unwrap();
        let back = load_gradients(&p).unwrap();
        assert_eq!(back.count(), 3);
        assert_eq!(back.dim(), 4);
        assert_eq!(back, ds);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"GDS1");
        assert_eq!(&bytes[4..8], &4u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &ds.row(0)[0].to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.gds");
        save_gradients(&sample(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[3] = b'2';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_gradients(&p), Err(DataError::BadMagic { found, .. }) if found == "GDS2"));
    }

    #[test]
    fn truncated_float_section_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.gds");
        save_gradients(&sample(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // cut in the middle of the 6th float
        let cut = 16 + 5 * 8 + 3;
        std::fs::write(&p, &bytes[..cut]).unwrap();
        match load_gradients(&p) {
            Err(DataError::TruncatedFile { offset, needed }) => {
                assert_eq!(offset, cut as u64);
                assert_eq!(needed, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_metadata_and_garbage_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.gds");
        save_gradients(&sample(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_gradients(&p), Err(DataError::TruncatedFile { .. })));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] = b'#';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_gradients(&p), Err(DataError::Metadata(_))));
    }

    #[test]
    fn rejects_non_finite_rows() {
        assert!(GradientDataset::new(2, vec![1.0, f64::NAN], meta()).is_err());
        assert!(GradientDataset::new(2, vec![], meta()).is_err());
        assert!(GradientDataset::new(2, vec![1.0, 2.0, 3.0], meta()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            dim in 1usize..8,
            rows in 1usize..6,
            seed in any::<u64>(),
            clip in any::<f64>().prop_filter("finite", |c| c.is_finite()),
            values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 48),
        ) {
            let data: Vec<f64> = values.iter().cycle().take(dim * rows).copied().collect();
            let ds = GradientDataset::new(dim, data, GradientMetadata {
                source_model: "x".into(), clip, seed, extra: BTreeMap::new(),
            }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("g.gds");
            save_gradients(&ds, &p).unwrap();
            let back = load_gradients(&p).unwrap();
            prop_assert_eq!(back.metadata.clip.to_bits(), clip.to_bits());
            for (a, b) in back.rows().flatten().zip(ds.rows().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
