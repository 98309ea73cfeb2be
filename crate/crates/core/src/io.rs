//! Little-endian binary container for arrays of 32-bit floats.
//!
//! Layout: magic `CTDL`, version `u32`, dtype `u8` (0 = f32), ndim `u8`,
//! `ndim` dimensions as `u32`, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTDL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// An n-dimensional f32 array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Container {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("unsupported rank {}", dims.len())));
        }
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Err(Error::Format(m.to_string()));
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return fail("bad magic");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes[8] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
        }
        let ndim = bytes[9] as usize;
        let header = 10 + 4 * ndim;
        if ndim == 0 || bytes.len() < header {
            return fail("truncated header");
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        if bytes.len() != header + 4 * count {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                bytes.len() - header,
                4 * count
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
