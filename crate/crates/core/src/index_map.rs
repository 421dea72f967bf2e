//! Sparse output-to-input support map of a QuadConv layer, its operation
//! counters, and the on-disk cache format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh;

pub const MAP_MAGIC: &[u8; 8] = b"QCMAP001";

/// Euclidean distance between two points. The support map and the bump
/// function both go through this so their `< alpha` tests agree bit for bit.
#[inline]
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Work counters for complexity instrumentation.
#[derive(Debug, Default)]
pub struct OpCounter {
    distance_evals: AtomicU64,
    kernel_evals: AtomicU64,
    macs: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_distance_evals(&self, n: u64) {
        self.distance_evals.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_kernel_evals(&self, n: u64) {
        self.kernel_evals.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_macs(&self, n: u64) {
        self.macs.fetch_add(n, Ordering::Relaxed);
    }

    pub fn distance_evals(&self) -> u64 {
        self.distance_evals.load(Ordering::Relaxed)
    }

    pub fn kernel_evals(&self) -> u64 {
        self.kernel_evals.load(Ordering::Relaxed)
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.distance_evals.store(0, Ordering::Relaxed);
        self.kernel_evals.store(0, Ordering::Relaxed);
        self.macs.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub mean: f64,
    pub max: usize,
    pub empty: usize,
    pub total: usize,
}

/// For every output point `j`, the sorted input indices `i` with
/// `|y_j - x_i| < alpha`. Stored in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    alpha: f64,
    row_start: Vec<usize>,
    indices: Vec<u32>,
}

impl IndexMap {
    /// Assembles a map from explicit neighbour lists; each list is sorted.
    pub fn from_lists(alpha: f64, lists: Vec<Vec<u32>>) -> Result<Self> {
        ensure!(alpha > 0.0 && alpha.is_finite(), Config, "alpha must be positive");
        let mut row_start = Vec::with_capacity(lists.len() + 1);
        row_start.push(0);
        let mut indices = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend_from_slice(&l);
            row_start.push(indices.len());
        }
        Ok(IndexMap {
            alpha,
            row_start,
            indices,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of output points.
    pub fn n_out(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.indices[self.row_start[j]..self.row_start[j + 1]]
    }

    pub fn row_range(&self, j: usize) -> std::ops::Range<usize> {
        self.row_start[j]..self.row_start[j + 1]
    }

    /// Total number of (j, i) pairs.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    pub fn stats(&self) -> MapStats {
        let n = self.n_out();
        let mut max = 0;
        let mut empty = 0;
        for j in 0..n {
            let l = self.row(j).len();
            max = max.max(l);
            if l == 0 {
                empty += 1;
            }
        }
        MapStats {
            mean: self.nnz() as f64 / n.max(1) as f64,
            max,
            empty,
            total: self.nnz(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAP_MAGIC);
        w.f64(self.alpha);
        w.u64(self.n_out() as u64);
        for j in 0..self.n_out() {
            let row = self.row(j);
            w.u32(row.len() as u32);
            for &i in row {
                w.u32(i);
            }
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, MAP_MAGIC, "index map cache")?;
        let alpha = r.f64()?;
        ensure!(
            alpha > 0.0 && alpha.is_finite(),
            Format,
            "index map cache: alpha {alpha}"
        );
        let n_out = r.len_u64()?;
        // Every row needs at least its 4-byte length.
        ensure!(
            n_out <= buf.len() / 4,
            Format,
            "index map cache: truncated (claims {n_out} rows)"
        );
        let mut row_start = Vec::with_capacity(n_out + 1);
        row_start.push(0);
        let mut indices = Vec::new();
        for _ in 0..n_out {
            let len = r.u32()? as usize;
            let raw = r.take(len * 4)?;
            let start = indices.len();
            indices.extend(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap())),
            );
            ensure!(
                indices[start..].windows(2).all(|w| w[0] < w[1]),
                Format,
                "index map cache: row not strictly sorted"
            );
            row_start.push(indices.len());
        }
        r.expect_end()?;
        Ok(IndexMap {
            alpha,
            row_start,
            indices,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checks that every index is valid for meshes of the given sizes.
    pub fn check_sizes(&self, n_in: usize, n_out: usize) -> Result<()> {
        ensure!(
            self.n_out() == n_out,
            Contract,
            "index map has {} rows, output mesh has {n_out} points",
            self.n_out()
        );
        if let Some(m) = self.max_index() {
            ensure!(
                (m as usize) < n_in,
                Contract,
                "index map refers to input {m}, input mesh has {n_in} points"
            );
        }
        Ok(())
    }
}

fn warn_empty(map: &IndexMap) {
    let s = map.stats();
    if s.empty > 0 {
        log::warn!(
            "{} of {} output points have no input inside alpha={}; their features will be zero",
            s.empty,
            map.n_out(),
            map.alpha
        );
    }
}

fn check_pair(input: &Mesh, output: &Mesh, alpha: f64) -> Result<()> {
    ensure!(
        input.dim() == output.dim(),
        Shape,
        "input mesh is {}-D, output mesh {}-D",
        input.dim(),
        output.dim()
    );
    ensure!(
        alpha > 0.0 && alpha.is_finite(),
        Config,
        "alpha must be positive, got {alpha}"
    );
    ensure!(
        input.len() <= u32::MAX as usize,
        Config,
        "input mesh too large for 32-bit indices"
    );
    Ok(())
}

/// Reference construction: tests every (output, input) pair.
pub fn build_index_map(
    input: &Mesh,
    output: &Mesh,
    alpha: f64,
    counter: &OpCounter,
) -> Result<IndexMap> {
    check_pair(input, output, alpha)?;
    let lists: Vec<Vec<u32>> = (0..output.len())
        .into_par_iter()
        .map(|j| {
            let y = output.point(j);
            input
                .iter()
                .enumerate()
                .filter(|(_, x)| distance(y, x) < alpha)
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect();
    counter.add_distance_evals((input.len() * output.len()) as u64);
    let map = IndexMap::from_lists(alpha, lists)?;
    warn_empty(&map);
    Ok(map)
}

/// Uniform bucket grid over the input points with cell side `alpha`.
struct Buckets {
    lo: Vec<f64>,
    cell: f64,
    dims: Vec<i64>,
    cells: HashMap<Vec<i64>, Vec<u32>>,
}

impl Buckets {
    fn new(input: &Mesh, cell: f64) -> Self {
        let (lo, hi) = input.bounds();
        let dims = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| ((b - a) / cell).floor() as i64 + 1)
            .collect();
        let mut b = Buckets {
            lo,
            cell,
            dims,
            cells: HashMap::new(),
        };
        for (i, p) in input.iter().enumerate() {
            let key = b.key(p);
            b.cells.entry(key).or_default().push(i as u32);
        }
        b
    }

    fn key(&self, p: &[f64]) -> Vec<i64> {
        p.iter()
            .zip(&self.lo)
            .map(|(x, l)| ((x - l) / self.cell).floor() as i64)
            .collect()
    }

    /// Calls `f` for every input index in the 3^D block of cells around `p`.
    fn for_each_near(&self, p: &[f64], mut f: impl FnMut(u32)) {
        let centre = self.key(p);
        let dim = centre.len();
        let mut offset = vec![-1i64; dim];
        loop {
            let key: Vec<i64> = centre.iter().zip(&offset).map(|(c, o)| c + o).collect();
            let inside = key.iter().zip(&self.dims).all(|(k, n)| *k >= 0 && k < n);
            if inside {
                if let Some(list) = self.cells.get(&key) {
                    list.iter().for_each(|&i| f(i));
                }
            }
            let mut d = 0;
            loop {
                if d == dim {
                    return;
                }
                offset[d] += 1;
                if offset[d] <= 1 {
                    break;
                }
                offset[d] = -1;
                d += 1;
            }
        }
    }
}

/// Bucket-accelerated construction; produces exactly the same map as
/// [`build_index_map`] while testing far fewer pairs.
pub fn build_index_map_bucketed(
    input: &Mesh,
    output: &Mesh,
    alpha: f64,
    counter: &OpCounter,
) -> Result<IndexMap> {
    check_pair(input, output, alpha)?;
    let buckets = Buckets::new(input, alpha);
    let results: Vec<(Vec<u32>, u64)> = (0..output.len())
        .into_par_iter()
        .map(|j| {
            let y = output.point(j);
            let mut row = Vec::new();
            let mut tests = 0u64;
            buckets.for_each_near(y, |i| {
                tests += 1;
                if distance(y, input.point(i as usize)) < alpha {
                    row.push(i);
                }
            });
            (row, tests)
        })
        .collect();
    let tests = results.iter().map(|r| r.1).sum();
    counter.add_distance_evals(tests);
    let map = IndexMap::from_lists(alpha, results.into_iter().map(|r| r.0).collect())?;
    warn_empty(&map);
    Ok(map)
}

fn mean_neighbours(input: &Mesh, output: &Mesh, alpha: f64) -> f64 {
    let buckets = Buckets::new(input, alpha);
    let total: usize = (0..output.len())
        .into_par_iter()
        .map(|j| {
            let y = output.point(j);
            let mut c = 0;
            buckets.for_each_near(y, |i| {
                if distance(y, input.point(i as usize)) < alpha {
                    c += 1;
                }
            });
            c
        })
        .sum();
    total as f64 / output.len() as f64
}

/// Support radius whose mean neighbour count is within 20% of `target_s`.
///
/// Bisects for the smallest radius reaching the target; if the count jumps past
/// the tolerance band at that radius the bracket's lower end is tried as well.
pub fn choose_alpha(input: &Mesh, output: &Mesh, target_s: usize) -> Result<f64> {
    ensure!(target_s >= 1, Config, "target neighbour count must be >= 1");
    ensure!(
        target_s <= input.len(),
        Config,
        "target neighbour count {target_s} exceeds input mesh size {}",
        input.len()
    );
    ensure!(input.dim() == output.dim(), Shape, "mesh dimensions differ");
    let target = target_s as f64;
    let (ilo, ihi) = input.bounds();
    let (olo, ohi) = output.bounds();
    let span: f64 = (0..input.dim())
        .map(|d| {
            let a = ilo[d].min(olo[d]);
            let b = ihi[d].max(ohi[d]);
            (b - a) * (b - a)
        })
        .sum::<f64>()
        .sqrt();
    let mut hi = span * (1.0 + 1e-9) + f64::MIN_POSITIVE.sqrt();
    let mut lo = 0.0f64;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mean_neighbours(input, output, mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let within = |a: f64| {
        a > 0.0 && (mean_neighbours(input, output, a) - target).abs() <= 0.2 * target
    };
    if within(hi) {
        Ok(hi)
    } else if within(lo) {
        Ok(lo)
    } else {
        Err(Error::Config(format!(
            "no support radius gives a mean neighbour count within 20% of {target_s}"
        )))
    }
}
