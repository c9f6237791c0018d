//! On-disk feature matrix: fixed-dim f32 rows with an integrity checksum.
//!
//! Layout (little-endian): 8-byte magic `GPFMFEAT`, u32 version (1),
//! u32 dim, u64 count, u8 dtype tag (0 = f32), 7 pad bytes, then
//! `count * dim` f32 values, then a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Result, UkdError};

const MAGIC: &[u8; 8] = b"GPFMFEAT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(UkdError::Dimension("feature dim must be positive".into()));
        }
        Ok(FeatureStore { dim, data: Vec::new() })
    }

    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(UkdError::Dimension("feature dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(UkdError::Dimension(format!(
                "{} values not divisible by dim {dim}",
                data.len()
            )));
        }
        Ok(FeatureStore { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(UkdError::Dimension(format!(
                "row of {} values in a dim-{} store",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, i: usize) -> Result<&[f32]> {
        if i >= self.count() {
            return Err(UkdError::Dimension(format!("row {i} of {}", self.count())));
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_f64(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.row(i)?.iter().map(|&v| v as f64).collect())
    }

    pub fn rows(&self) -> &[f32] {
        &self.data
    }

    /// Serialize to bytes (useful for byte-identity tests).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0u8; 7]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(UkdError::Corrupt("feature store shorter than its header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(UkdError::Corrupt("feature store magic mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(UkdError::VersionMismatch(format!(
                "feature store version {version}, expected {VERSION}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let dtype = bytes[24];
        if dtype != DTYPE_F32 {
            return Err(UkdError::Corrupt(format!("unknown dtype tag {dtype}")));
        }
        if dim == 0 {
            return Err(UkdError::Corrupt("feature store with dim 0".into()));
        }
        let payload_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| UkdError::Corrupt("feature store size overflows".into()))?;
        if bytes.len() != HEADER_LEN + payload_len + 4 {
            return Err(UkdError::Corrupt(format!(
                "feature store length {} vs expected {}",
                bytes.len(),
                HEADER_LEN + payload_len + 4
            )));
        }
        let body = &bytes[..HEADER_LEN + payload_len];
        let want_crc = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
        let got_crc = crc32fast::hash(body);
        if want_crc != got_crc {
            return Err(UkdError::Corrupt(format!(
                "feature store CRC {got_crc:#010x} vs recorded {want_crc:#010x}"
            )));
        }
        let mut data = Vec::with_capacity(count * dim);
        for chunk in bytes[HEADER_LEN..HEADER_LEN + payload_len].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(FeatureStore { dim, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
