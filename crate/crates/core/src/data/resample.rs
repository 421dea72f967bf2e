//! Interpolation of fields between meshes, expressed as sparse linear operators.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::FieldSeries;
use crate::autodiff::SparseMatrix;
use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh;

const HULL_TOL: f64 = 1e-12;

/// Rejects targets outside the source bounding box widened by `margin`.
fn check_inside(source: &Mesh, target: &Mesh, margin: f64) -> Result<()> {
    let (lo, hi) = source.bounds();
    let tol = margin + HULL_TOL;
    for (j, p) in target.iter().enumerate() {
        for d in 0..p.len() {
            if p[d] < lo[d] - tol || p[d] > hi[d] + tol {
                return Err(Error::Interpolation(format!(
                    "target point {j} lies outside the source domain on axis {d} ({} not in [{}, {}])",
                    p[d], lo[d], hi[d]
                )));
            }
        }
    }
    Ok(())
}

/// `(box volume / N)^(1/D)`: the spacing a uniform grid of the same size would have.
fn mean_spacing(mesh: &Mesh) -> f64 {
    let (lo, hi) = mesh.bounds();
    let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(f64::MIN_POSITIVE)).product();
    (vol / mesh.len() as f64).powf(1.0 / mesh.dim() as f64)
}

/// Multilinear interpolation weights from a uniform grid.
fn grid_rows(source: &Mesh, target: &Mesh, side: usize, h: f64) -> Vec<Vec<(usize, f64)>> {
    let dim = source.dim();
    target
        .iter()
        .map(|p| {
            let mut base = vec![0usize; dim];
            let mut frac = vec![0.0; dim];
            for d in 0..dim {
                let s = (p[d] / h).clamp(0.0, (side - 1) as f64);
                let i = (s.floor() as usize).min(side - 2);
                base[d] = i;
                frac[d] = (s - i as f64).clamp(0.0, 1.0);
            }
            let mut row = Vec::with_capacity(1 << dim);
            for corner in 0..1usize << dim {
                let mut w = 1.0;
                let mut flat = 0;
                for d in 0..dim {
                    let up = (corner >> (dim - 1 - d)) & 1;
                    w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
                    flat = flat * side + base[d] + up;
                }
                if w != 0.0 {
                    row.push((flat, w));
                }
            }
            row
        })
        .collect()
}

/// Monomials of degree <= 2 in `dim` variables, evaluated at `x`.
fn quadratic_basis(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend_from_slice(x);
    for a in 0..x.len() {
        for b in a..x.len() {
            out.push(x[a] * x[b]);
        }
    }
}

/// Weighted local quadratic least squares over the nearest source points.
fn scattered_rows(source: &Mesh, target: &Mesh) -> Result<Vec<Vec<(usize, f64)>>> {
    let dim = source.dim();
    let nb = 1 + dim + dim * (dim + 1) / 2;
    let k = (2 * nb + 2).min(source.len());
    ensure!(
        k >= nb,
        Interpolation,
        "need at least {nb} source points for a local quadratic fit"
    );
    target
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| {
            let mut d: Vec<(f64, usize)> = source
                .iter()
                .enumerate()
                .map(|(i, q)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
            let near = &mut d[..k];
            near.sort_by(|a, b| a.0.total_cmp(&b.0));
            if near[0].0 == 0.0 {
                return Ok(vec![(near[0].1, 1.0)]);
            }
            // Offsets are scaled by the neighbourhood radius to keep the
            // normal equations well conditioned.
            let r2 = near[k - 1].0;
            let r = r2.sqrt();
            let mut a = DMatrix::zeros(k, nb);
            let mut w = DVector::zeros(k);
            let mut row_buf = Vec::with_capacity(nb);
            let mut off = vec![0.0; dim];
            for (row, &(d2, i)) in near.iter().enumerate() {
                let q = source.point(i);
                for c in 0..dim {
                    off[c] = (q[c] - p[c]) / r;
                }
                quadratic_basis(&off, &mut row_buf);
                for (c, v) in row_buf.iter().enumerate() {
                    a[(row, c)] = *v;
                }
                w[row] = (-d2 / r2).exp();
            }
            let aw = a.transpose() * DMatrix::from_diagonal(&w);
            let normal = &aw * &a;
            let inv = normal.try_inverse().ok_or_else(|| {
                Error::Interpolation("degenerate neighbourhood for local fit".into())
            })?;
            let coef = inv.row(0) * aw;
            Ok(near
                .iter()
                .enumerate()
                .map(|(row, &(_, i))| (i, coef[row]))
                .collect())
        })
        .collect()
}

/// Linear operator mapping values on `source` to values on `target`.
///
/// Grid sources use multilinear interpolation; scattered sources use a
/// distance-weighted local quadratic fit. Both reproduce affine fields exactly.
/// Scattered sources accept targets up to one mean spacing outside their
/// bounding box, so a grid spanning the same domain can be reached; anything
/// further out is an interpolation error.
pub fn resample_operator(source: &Mesh, target: &Mesh) -> Result<SparseMatrix> {
    ensure!(
        source.dim() == target.dim(),
        Shape,
        "source mesh is {}-D, target {}-D",
        source.dim(),
        target.dim()
    );
    if source == target {
        return Ok(SparseMatrix::from_triplets(
            source.len(),
            source.len(),
            (0..source.len()).map(|i| (i, i, 1.0)).collect(),
        ));
    }
    let rows = match source.grid_shape() {
        Some((side, h)) if side >= 2 => {
            check_inside(source, target, 0.0)?;
            grid_rows(source, target, side, h)
        }
        _ => {
            check_inside(source, target, mean_spacing(source))?;
            scattered_rows(source, target)?
        }
    };
    let triplets = rows
        .into_iter()
        .enumerate()
        .flat_map(|(j, r)| r.into_iter().map(move |(i, w)| (j, i, w)))
        .collect();
    Ok(SparseMatrix::from_triplets(target.len(), source.len(), triplets))
}

/// Applies a resampling operator to every channel of every sample.
pub fn apply_operator(op: &SparseMatrix, series: &FieldSeries) -> Result<FieldSeries> {
    ensure!(
        series.points() == op.cols,
        Shape,
        "operator expects {} points, series has {}",
        op.cols,
        series.points()
    );
    let c = series.channels();
    let mut values = vec![0.0; series.samples() * c * op.rows];
    for (src, dst) in series
        .values()
        .chunks_exact(series.points())
        .zip(values.chunks_exact_mut(op.rows))
    {
        op.apply(src, dst);
    }
    FieldSeries::new(series.samples(), c, op.rows, series.dt(), values)
}

pub fn resample_series(series: &FieldSeries, source: &Mesh, target: &Mesh) -> Result<FieldSeries> {
    series.check_mesh(source)?;
    apply_operator(&resample_operator(source, target)?, series)
}

/// Relative HS error of `series` after a trip `source -> target -> source`.
pub fn resample_roundtrip_error(series: &FieldSeries, source: &Mesh, target: &Mesh) -> Result<f64> {
    let there = resample_series(series, source, target)?;
    let back = resample_series(&there, target, source)?;
    let num: f64 = back
        .values()
        .iter()
        .zip(series.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = series.values().iter().map(|v| v * v).sum();
    ensure!(den > 0.0, Metric, "round-trip error of an all-zero series");
    Ok((num / den).sqrt())
}
