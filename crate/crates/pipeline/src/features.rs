//! Feature file reader and writer.
//!
//! ```text
//! "CADF" | version u32 = 1 | n_images u32 | grid_h u32 | grid_w u32 | channels u32
//! payload  n_images x grid_h x grid_w x channels  f32 LE
//! optional "RGNS" | n_images x grid_h x grid_w  u16 LE labels
//! ```

use std::path::Path;

use thiserror::Error;
use ucad_core::tensor::FeatureGrid;
use ucad_core::tuning::RegionMask;

pub const FEATURE_MAGIC: [u8; 4] = *b"CADF";
pub const REGION_MAGIC: [u8; 4] = *b"RGNS";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },
    #[error("bad dimensions: {0}")]
    Dims(String),
    #[error("truncated payload at byte {offset}: {needed} more bytes needed")]
    Truncated { offset: usize, needed: usize },
    #[error("non-finite value at ({image},{row},{col},{ch})")]
    NonFinite { image: usize, row: usize, col: usize, ch: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub grids: Vec<FeatureGrid<f64>>,
    pub regions: Option<Vec<RegionMask>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureFileError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(FeatureFileError::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self) -> Result<[u8; 4], FeatureFileError> {
        Ok(self.take(4)?.try_into().expect("4 bytes"))
    }

    fn u32(&mut self) -> Result<u32, FeatureFileError> {
        Ok(u32::from_le_bytes(self.magic()?))
    }
}

pub fn encode(file: &FeatureFile) -> Result<Vec<u8>, FeatureFileError> {
    let first = file.grids.first().ok_or_else(|| FeatureFileError::Dims("no grids to write".into()))?;
    let (h, w, c) = (first.grid_h(), first.grid_w(), first.channels());
    if file.grids.iter().any(|g| (g.grid_h(), g.grid_w(), g.channels()) != (h, w, c)) {
        return Err(FeatureFileError::Dims("grids differ in shape".into()));
    }
    let mut out = Vec::with_capacity(24 + file.grids.len() * h * w * c * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    for v in [FEATURE_VERSION, file.grids.len() as u32, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &file.grids {
        for &v in g.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(regions) = &file.regions {
        if regions.len() != file.grids.len() || regions.iter().any(|r| (r.height(), r.width()) != (h, w)) {
            return Err(FeatureFileError::Dims("region masks do not match the grids".into()));
        }
        out.extend_from_slice(&REGION_MAGIC);
        for r in regions {
            for &l in r.labels() {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureFile, FeatureFileError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.magic()?;
    if magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic { expected: FEATURE_MAGIC, found: magic });
    }
    let version = cur.u32()?;
    if version != FEATURE_VERSION {
        return Err(FeatureFileError::Version { expected: FEATURE_VERSION, found: version });
    }
    let n = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(FeatureFileError::Dims(format!("{n} images of {h}x{w}x{c}")));
    }
    let per = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| FeatureFileError::Dims("grid size overflows".into()))?;
    let mut grids = Vec::with_capacity(n);
    for image in 0..n {
        let raw = cur.take(per * 4)?;
        let mut data = Vec::with_capacity(per);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                let (row, rest) = (i / (w * c), i % (w * c));
                return Err(FeatureFileError::NonFinite { image, row, col: rest / c, ch: rest % c });
            }
            data.push(f64::from(v));
        }
        grids.push(FeatureGrid::new(h, w, c, data).map_err(|e| FeatureFileError::Dims(e.to_string()))?);
    }
    let regions = if cur.pos == bytes.len() {
        None
    } else {
        let marker = cur.magic()?;
        if marker != REGION_MAGIC {
            return Err(FeatureFileError::BadMagic { expected: REGION_MAGIC, found: marker });
        }
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = cur.take(h * w * 2)?;
            let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
            masks.push(RegionMask::new(h, w, labels).map_err(|e| FeatureFileError::Dims(e.to_string()))?);
        }
        Some(masks)
    };
    if cur.pos != bytes.len() {
        return Err(FeatureFileError::Trailing(bytes.len() - cur.pos));
    }
    Ok(FeatureFile { grids, regions })
}

pub fn write_features(path: impl AsRef<Path>, file: &FeatureFile) -> Result<(), FeatureFileError> {
    std::fs::write(path, encode(file)?)?;
    Ok(())
}

/// Reads and validates a feature file.
pub fn ingest_features(path: impl AsRef<Path>) -> Result<FeatureFile, FeatureFileError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_regions: bool) -> FeatureFile {
        let grids = (0..2)
            .map(|k| FeatureGrid::new(2, 3, 2, (0..12).map(|i| (i as f32 * 0.37 - k as f32) as f64).collect()).unwrap())
            .collect();
        let regions = with_regions.then(|| vec![RegionMask::new(2, 3, vec![0, 1, 1, 2, 0, 0]).unwrap(); 2]);
        FeatureFile { grids, regions }
    }

    #[test]
    fn round_trip() {
        for r in [false, true] {
            let f = sample(r);
            assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode(&sample(false)).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FeatureFileError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode(&bad), Err(FeatureFileError::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(FeatureFileError::Version { found: 9, .. })));
    }

    #[test]
    fn nan_is_located() {
        let mut bytes = encode(&sample(false)).unwrap();
        // image 1, row 1, col 2, channel 1
        let flat = 12 + (3 * 2) + 2 * 2 + 1;
        let at = 24 + flat * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at (1,1,2,1)");
    }
}
