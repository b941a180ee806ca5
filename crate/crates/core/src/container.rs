//! Binary matrix container shared by dataset exports and learner checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "SSCL"
//! version  u16      currently 1
//! blocks   u32      number of matrices
//! per block:
//!   rows   u64
//!   cols   u64
//!   data   rows*cols f64, row-major
//! ```
//!
//! A JSON sidecar at `<path>.json` carries whatever configuration the writer
//! wants to attach.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"SSCL";
pub const VERSION: u16 = 1;

pub fn encode(blocks: &[Matrix]) -> Vec<u8> {
    let payload: usize = blocks.iter().map(|m| 16 + 8 * m.len()).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for m in blocks {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected SSCL".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("block size overflows".into()))?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("block size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Matrix::from_vec(rows, cols, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    Ok(blocks)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the container and its JSON sidecar.
pub fn write<T: Serialize>(path: &Path, blocks: &[Matrix], meta: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(blocks))?;
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<(Vec<Matrix>, T)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let blocks = decode(&bytes)?;
    let meta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    Ok((blocks, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[Matrix::from_vec(1, 2, vec![1.0, -2.5]).unwrap()]);
        assert_eq!(&bytes[..4], b"SSCL");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(bytes.len(), 10 + 16 + 16);
        assert_eq!(&bytes[26..34], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut bytes = encode(&[Matrix::zeros(2, 2)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            shapes in prop::collection::vec((0usize..5, 0usize..5), 0..4),
            fill in -1e6f64..1e6,
        ) {
            let blocks: Vec<Matrix> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| {
                    Matrix::from_vec(r, c, (0..r * c).map(|k| fill / (1.0 + (k + i) as f64)).collect()).unwrap()
                })
                .collect();
            prop_assert_eq!(decode(&encode(&blocks)).unwrap(), blocks);
        }
    }
}
