//! WLT1 binary tensor files.
//!
//! Layout (all little-endian):
//! - magic: `b"WLT1"`
//! - rank: u32
//! - dims: rank * u32
//! - data: f32 * product(dims), row-major

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WLT1";

/// A dense row-major f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} describe {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset, message };

        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt(0, "missing WLT1 magic".into()));
        }
        let mut pos = 4;
        let read_u32 = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| fmt(pos, "truncated header".into()))
        };

        let rank = read_u32(pos)? as usize;
        pos += 4;
        if rank == 0 {
            return Err(fmt(4, "rank must be at least 1".into()));
        }
        let mut dims = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for i in 0..rank {
            let d = read_u32(pos)? as usize;
            if d == 0 {
                return Err(fmt(pos, format!("dimension {i} is zero")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| fmt(pos, "element count overflows".into()))?;
            dims.push(d);
            pos += 4;
        }

        let payload = &bytes[pos..];
        let expected = numel
            .checked_mul(4)
            .ok_or_else(|| fmt(pos, "payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(fmt(
                pos,
                format!(
                    "dims {dims:?} need {expected} payload bytes, found {}",
                    payload.len()
                ),
            ));
        }

        let mut data = Vec::with_capacity(numel);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(fmt(pos + 4 * i, format!("non-finite value {v} at element {i}")));
            }
            data.push(v);
        }
        Ok(Tensor { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: &[u32]) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut expected = header(&[1, 2]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(t.to_bytes(), expected);
        assert_eq!(Tensor::from_bytes(&expected).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Tensor::from_bytes(b"WLT2\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn rejects_short_payload() {
        let mut b = header(&[2, 2]);
        b.extend_from_slice(&[0u8; 12]);
        let err = Tensor::from_bytes(&b).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 16, .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_dims() {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        let err = Tensor::from_bytes(&b).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 12, .. }), "{err}");
    }

    #[test]
    fn nan_reports_offset() {
        let mut b = header(&[3]);
        for v in [0.0f32, f32::NAN, 1.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match Tensor::from_bytes(&b).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 12 + 4),
            e => panic!("unexpected {e}"),
        }
    }
}
