use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh;

pub const SERIES_MAGIC: &[u8; 8] = b"QCSER001";

/// `T` samples of a `C`-channel field on `N` mesh points, stored sample-major
/// (`values[(t * C + c) * N + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    samples: usize,
    channels: usize,
    points: usize,
    dt: f64,
    values: Vec<f64>,
}

impl FieldSeries {
    pub fn new(samples: usize, channels: usize, points: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        ensure!(
            samples >= 1 && channels >= 1 && points >= 1,
            Shape,
            "series must be non-empty, got T={samples} C={channels} N={points}"
        );
        let len = samples
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(points))
            .ok_or_else(|| Error::Shape("series size overflows".into()))?;
        ensure!(
            values.len() == len,
            Shape,
            "T={samples} C={channels} N={points} needs {len} values, got {}",
            values.len()
        );
        ensure!(dt.is_finite(), Contract, "sample spacing must be finite");
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Contract,
            "series contains non-finite values"
        );
        Ok(FieldSeries {
            samples,
            channels,
            points,
            dt,
            values,
        })
    }

    /// Builds a series from per-sample `C x N` blocks.
    pub fn from_samples(channels: usize, points: usize, dt: f64, samples: Vec<Vec<f64>>) -> Result<Self> {
        let t = samples.len();
        let mut values = Vec::with_capacity(t * channels * points);
        for (k, s) in samples.into_iter().enumerate() {
            ensure!(
                s.len() == channels * points,
                Shape,
                "sample {k} has {} values, expected {}",
                s.len(),
                channels * points
            );
            values.extend(s);
        }
        Self::new(t, channels, points, dt, values)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.points
    }

    /// The `C x N` block of sample `t`.
    pub fn sample(&self, t: usize) -> &[f64] {
        let l = self.sample_len();
        &self.values[t * l..(t + 1) * l]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.sample_len())
    }

    /// New series made of the listed samples, in order.
    pub fn select(&self, indices: &[usize]) -> Result<FieldSeries> {
        ensure!(!indices.is_empty(), Shape, "cannot select zero samples");
        let mut values = Vec::with_capacity(indices.len() * self.sample_len());
        for &t in indices {
            ensure!(t < self.samples, Shape, "sample {t} out of range for T={}", self.samples);
            values.extend_from_slice(self.sample(t));
        }
        FieldSeries::new(indices.len(), self.channels, self.points, self.dt, values)
    }

    /// Fails unless the series lives on `mesh`.
    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        ensure!(
            self.points == mesh.len(),
            Contract,
            "series has N={} but the mesh has {} points",
            self.points,
            mesh.len()
        );
        Ok(())
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(SERIES_MAGIC);
        w.u64(self.samples as u64);
        w.u32(self.channels as u32);
        w.u64(self.points as u64);
        w.f64(self.dt);
        w.f64s(&self.values);
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<FieldSeries> {
        let mut r = Reader::new(buf, SERIES_MAGIC, "series file")?;
        let t = r.len_u64()?;
        let c = r.u32()? as usize;
        let n = r.len_u64()?;
        let dt = r.f64()?;
        let len = t
            .checked_mul(c)
            .and_then(|v| v.checked_mul(n))
            .ok_or_else(|| Error::Format("series file: size overflow".into()))?;
        let values = r.f64s(len)?;
        r.expect_end()?;
        FieldSeries::new(t, c, n, dt, values).map_err(|e| Error::Format(format!("series file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FieldSeries> {
        FieldSeries::from_bytes(&fs::read(path)?)
    }
}
