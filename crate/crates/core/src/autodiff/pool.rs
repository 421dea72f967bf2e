//! Max pooling and nearest-neighbour unpooling on lexicographic uniform grids.

use crate::error::{ensure, Result};

/// Coarse-grid flat index of every fine-grid point.
pub(crate) fn coarse_of_fine(dim: usize, fine_side: usize, window: usize) -> Vec<usize> {
    let coarse_side = fine_side / window;
    let total = fine_side.pow(dim as u32);
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut coarse = 0;
            let mut stride = 1;
            for _ in 0..dim {
                let k = rem % fine_side;
                rem /= fine_side;
                coarse += (k / window) * stride;
                stride *= coarse_side;
            }
            coarse
        })
        .collect()
}

fn check_grid(len: usize, channels: usize, dim: usize, side: usize) -> Result<usize> {
    ensure!(channels >= 1 && dim >= 1, Shape, "empty grid field");
    let n = side.pow(dim as u32);
    ensure!(
        len == channels * n,
        Shape,
        "field of length {len} is not {channels} channels of a {side}^{dim} grid"
    );
    Ok(n)
}

/// Channel-wise maximum over `window^D` blocks. Returns the pooled field and,
/// for every pooled value, the flat index of the input entry it came from
/// (the first maximum in scan order on ties).
pub fn maxpool_grid(
    field: &[f64],
    channels: usize,
    dim: usize,
    side: usize,
    window: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    ensure!(window >= 1, Shape, "pool window must be >= 1");
    let n = check_grid(field.len(), channels, dim, side)?;
    ensure!(
        side.is_multiple_of(window),
        Shape,
        "grid side {side} not divisible by pool window {window}"
    );
    let m = (side / window).pow(dim as u32);
    let map = coarse_of_fine(dim, side, window);
    let mut out = vec![f64::NEG_INFINITY; channels * m];
    let mut arg = vec![usize::MAX; channels * m];
    for c in 0..channels {
        for (i, &q) in map.iter().enumerate() {
            let v = field[c * n + i];
            let slot = c * m + q;
            if arg[slot] == usize::MAX || v > out[slot] {
                out[slot] = v;
                arg[slot] = c * n + i;
            }
        }
    }
    Ok((out, arg))
}

/// Copies each coarse value onto its `window^D` block of the fine grid.
pub fn unpool_grid(
    field: &[f64],
    channels: usize,
    dim: usize,
    coarse_side: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let m = check_grid(field.len(), channels, dim, coarse_side)?;
    let fine_side = coarse_side * window;
    let map = coarse_of_fine(dim, fine_side, window);
    let n = map.len();
    let mut out = vec![0.0; channels * n];
    for c in 0..channels {
        for (i, &q) in map.iter().enumerate() {
            out[c * n + i] = field[c * m + q];
        }
    }
    Ok(out)
}

/// Adjoint of [`unpool_grid`]: sums each fine block into its coarse cell.
pub fn unpool_adjoint(
    fine: &[f64],
    channels: usize,
    dim: usize,
    coarse_side: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let fine_side = coarse_side * window;
    let n = check_grid(fine.len(), channels, dim, fine_side)?;
    let m = coarse_side.pow(dim as u32);
    let map = coarse_of_fine(dim, fine_side, window);
    let mut out = vec![0.0; channels * m];
    for c in 0..channels {
        for (i, &q) in map.iter().enumerate() {
            out[c * m + q] += fine[c * n + i];
        }
    }
    Ok(out)
}
