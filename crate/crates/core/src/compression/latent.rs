//! Latent code file: `QCLAT001`, u64 T, u32 L, f64 dt, then `T L` little-endian f64.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{ensure, Result};

pub const LATENT_MAGIC: &[u8; 8] = b"QCLAT001";

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeries {
    dim: usize,
    dt: f64,
    codes: Vec<Vec<f64>>,
}

impl LatentSeries {
    pub fn new(dim: usize, dt: f64, codes: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(dim >= 1, Shape, "latent dimension must be >= 1");
        ensure!(
            codes.iter().all(|c| c.len() == dim),
            Shape,
            "every code must have {dim} values"
        );
        ensure!(
            codes.iter().flatten().all(|v| v.is_finite()),
            Contract,
            "latent codes must be finite"
        );
        Ok(LatentSeries { dim, dt, codes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[Vec<f64>] {
        &self.codes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(LATENT_MAGIC);
        w.u64(self.codes.len() as u64);
        w.u32(self.dim as u32);
        w.f64(self.dt);
        for c in &self.codes {
            w.f64s(c);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, LATENT_MAGIC, "latent file")?;
        let t = r.len_u64()?;
        let dim = r.u32()? as usize;
        let dt = r.f64()?;
        let codes = (0..t).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::new(dim, dt, codes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
