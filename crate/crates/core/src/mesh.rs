//! Point sets shared by every sample of a dataset.
//!
//! A [`Mesh`] is just `N` coordinate vectors in `R^D`, stored point-major. Uniform
//! tensor grids remember how they were built so that Newton-Cotes weights and
//! grid pooling can be derived from them.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{ensure, Error, Result};

pub const MESH_MAGIC: &[u8; 8] = b"QCMESH01";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshKind {
    UniformGrid { n_per_dim: usize, extent: f64 },
    Scattered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    points: Vec<f64>,
    kind: MeshKind,
}

impl Mesh {
    /// Builds a scattered mesh from point-major coordinates.
    pub fn from_points(dim: usize, points: Vec<f64>) -> Result<Self> {
        ensure!(dim >= 1, Config, "mesh dimension must be at least 1");
        ensure!(
            !points.is_empty() && points.len().is_multiple_of(dim),
            Shape,
            "coordinate buffer of length {} is not a non-empty multiple of D={dim}",
            points.len()
        );
        ensure!(
            points.iter().all(|c| c.is_finite()),
            Config,
            "mesh coordinates must be finite"
        );
        Ok(Mesh {
            dim,
            points,
            kind: MeshKind::Scattered,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn kind(&self) -> MeshKind {
        self.kind
    }

    pub fn is_grid(&self) -> bool {
        matches!(self.kind, MeshKind::UniformGrid { .. })
    }

    /// Grid side length and spacing, if this is a uniform grid.
    pub fn grid_shape(&self) -> Option<(usize, f64)> {
        match self.kind {
            MeshKind::UniformGrid { n_per_dim, extent } => {
                Some((n_per_dim, extent / (n_per_dim - 1) as f64))
            }
            MeshKind::Scattered => None,
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    /// Axis-aligned bounding box as `(min, max)` per axis.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.iter() {
            for d in 0..self.dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounds();
        lo.iter()
            .zip(&hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    /// Sub-mesh made of the given point indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Mesh> {
        ensure!(!indices.is_empty(), Config, "empty subset");
        let mut pts = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            ensure!(i < self.len(), Contract, "subset index {i} out of range");
            pts.extend_from_slice(self.point(i));
        }
        Mesh::from_points(self.dim, pts)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MESH_MAGIC);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.f64s(&self.points);
        w.finish()
    }

    /// Parses a mesh file. Grids are recognised by exact coordinate equality with
    /// the tensor grid they would have been generated from.
    pub fn from_bytes(buf: &[u8]) -> Result<Mesh> {
        let mut r = Reader::new(buf, MESH_MAGIC, "mesh file")?;
        let dim = r.u32()? as usize;
        let n = r.len_u64()?;
        ensure!(dim >= 1 && n >= 1, Format, "mesh file: D={dim}, N={n}");
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("mesh file: size overflow".into()))?;
        let points = r.f64s(total)?;
        r.expect_end()?;
        let mesh = Mesh::from_points(dim, points).map_err(|e| Error::Format(e.to_string()))?;
        Ok(mesh.detect_grid())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mesh> {
        Mesh::from_bytes(&fs::read(path)?)
    }

    fn detect_grid(self) -> Mesh {
        if !(1..=3).contains(&self.dim) {
            return self;
        }
        let n = self.len();
        let side = (n as f64).powf(1.0 / self.dim as f64).round() as usize;
        if side < 2 || side.pow(self.dim as u32) != n {
            return self;
        }
        let extent = self.points[self.points.len() - 1];
        if !(extent > 0.0) {
            return self;
        }
        match uniform_grid(self.dim, side, extent) {
            Ok(g) if g.points == self.points => g,
            _ => self,
        }
    }
}

/// Tensor-product grid on `[0, extent]^D` in lexicographic order (first axis slowest).
pub fn uniform_grid(dim: usize, n_per_dim: usize, extent: f64) -> Result<Mesh> {
    ensure!((1..=3).contains(&dim), Config, "grid dimension {dim} not in 1..=3");
    ensure!(n_per_dim >= 2, Config, "grid needs at least 2 points per axis");
    ensure!(
        extent.is_finite() && extent > 0.0,
        Config,
        "grid extent must be positive"
    );
    let h = extent / (n_per_dim - 1) as f64;
    let axis: Vec<f64> = (0..n_per_dim)
        .map(|k| if k == n_per_dim - 1 { extent } else { k as f64 * h })
        .collect();
    let total = n_per_dim.pow(dim as u32);
    let mut points = Vec::with_capacity(total * dim);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0usize; dim];
        for d in (0..dim).rev() {
            idx[d] = rem % n_per_dim;
            rem /= n_per_dim;
        }
        points.extend(idx.iter().map(|&k| axis[k]));
    }
    Ok(Mesh {
        dim,
        points,
        kind: MeshKind::UniformGrid { n_per_dim, extent },
    })
}

/// Point density over the unit square used by [`nonuniform_mesh`].
#[derive(Debug, Clone, Copy)]
pub enum Density {
    Uniform,
    /// `1 + peak * exp(-|x - center|^2 / width^2)`.
    GaussianBump {
        center: [f64; 2],
        width: f64,
        peak: f64,
    },
    /// Arbitrary non-negative density with a known upper bound.
    Custom { f: fn(&[f64; 2]) -> f64, max: f64 },
}

impl Density {
    pub fn eval(&self, x: &[f64; 2]) -> f64 {
        match *self {
            Density::Uniform => 1.0,
            Density::GaussianBump {
                center,
                width,
                peak,
            } => {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                1.0 + peak * (-r2 / (width * width)).exp()
            }
            Density::Custom { f, .. } => f(x),
        }
    }

    fn upper_bound(&self) -> f64 {
        match *self {
            Density::Uniform => 1.0,
            Density::GaussianBump { peak, .. } => 1.0 + peak.max(0.0),
            Density::Custom { max, .. } => max,
        }
    }
}

/// Samples `n` points in `[0,1]^2` by rejection against `density`.
pub fn nonuniform_mesh(n: usize, density: Density, seed: u64) -> Result<Mesh> {
    ensure!(n >= 1, Config, "mesh needs at least one point");
    let bound = density.upper_bound();
    ensure!(
        bound.is_finite() && bound > 0.0,
        Generation,
        "density upper bound must be positive and finite"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * n);
    let budget = 10_000 * n as u64 + 1_000_000;
    let mut tries = 0u64;
    while points.len() < 2 * n {
        tries += 1;
        if tries > budget {
            return Err(Error::Generation(format!(
                "rejection sampling accepted {} of {n} points in {budget} tries; density is zero almost everywhere",
                points.len() / 2
            )));
        }
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        let d = density.eval(&x);
        ensure!(d.is_finite() && d >= 0.0, Generation, "density {d} at {x:?}");
        if rng.gen::<f64>() * bound < d {
            points.extend_from_slice(&x);
        }
    }
    Mesh::from_points(2, points)
}

/// Indices of a uniformly random subset of size `n_out`, ascending.
pub fn random_subset(n: usize, n_out: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        (1..=n).contains(&n_out),
        Config,
        "cannot sample {n_out} of {n} points"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, n_out).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Random subset of the mesh points, without replacement, original order kept.
pub fn random_downsample(mesh: &Mesh, n_out: usize, seed: u64) -> Result<Mesh> {
    if n_out == mesh.len() {
        let mut m = mesh.clone();
        m.kind = MeshKind::Scattered;
        return Ok(m);
    }
    mesh.subset(&random_subset(mesh.len(), n_out, seed)?)
}
