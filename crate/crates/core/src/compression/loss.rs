use std::sync::Arc;

use crate::autodiff::{SparseMatrix, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh;

/// Finite-difference gradient on a uniform grid as a `(D N) x N` operator.
///
/// Row `d N + p` holds the derivative along axis `d` at flat point `p`
/// (axis 0 has the largest stride, matching [`crate::mesh::uniform_grid`]).
/// Interior points use central differences, boundary points the one-sided
/// second-order stencil `(-3, 4, -1) / 2h`.
pub fn fd_gradient_operator(mesh: &Mesh) -> Result<SparseMatrix> {
    let (side, h) = mesh
        .grid_shape()
        .ok_or_else(|| Error::UnsupportedMesh("finite differences need a uniform grid".into()))?;
    ensure!(side >= 3, UnsupportedMesh, "finite differences need at least 3 points per axis");
    let dim = mesh.dim();
    let n = mesh.len();
    let mut t = Vec::with_capacity(dim * n * 3);
    for d in 0..dim {
        let stride = side.pow((dim - 1 - d) as u32);
        for p in 0..n {
            let k = (p / stride) % side;
            let row = d * n + p;
            let c = 1.0 / (2.0 * h);
            if k == 0 {
                t.extend([(row, p, -3.0 * c), (row, p + stride, 4.0 * c), (row, p + 2 * stride, -c)]);
            } else if k == side - 1 {
                t.extend([(row, p, 3.0 * c), (row, p - stride, -4.0 * c), (row, p - 2 * stride, c)]);
            } else {
                t.extend([(row, p + stride, c), (row, p - stride, -c)]);
            }
        }
    }
    Ok(SparseMatrix::from_triplets(dim * n, n, t))
}

/// Squared Hilbert-Schmidt error plus `lambda` times the mean squared mismatch
/// of finite-difference gradients.
#[derive(Debug, Clone)]
pub struct LossSpec {
    lambda: f64,
    grad_op: Option<Arc<SparseMatrix>>,
}

impl LossSpec {
    /// The Sobolev term is only defined on uniform grids; `lambda > 0` on any
    /// other mesh is a configuration error.
    pub fn new(mesh: &Mesh, lambda: f64) -> Result<Self> {
        ensure!(lambda >= 0.0 && lambda.is_finite(), Config, "lambda must be finite and >= 0");
        if lambda == 0.0 {
            return Ok(LossSpec { lambda, grad_op: None });
        }
        ensure!(
            mesh.is_grid(),
            Config,
            "lambda = {lambda} requested on a scattered mesh; the Sobolev term needs a uniform grid"
        );
        Ok(LossSpec {
            lambda,
            grad_op: Some(Arc::new(fd_gradient_operator(mesh)?)),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Records the loss of a `C x N` reconstruction against a constant truth.
    pub fn record(&self, tape: &mut Tape, recon: Var, truth: Var) -> Result<Var> {
        let diff = tape.sub(recon, truth)?;
        let hs = tape.sum_squares(diff)?;
        match &self.grad_op {
            None => Ok(hs),
            Some(op) => {
                let g = tape.sparse_apply(diff, op.clone())?;
                let count = tape.value(g).len() as f64;
                let r = tape.sum_squares(g)?;
                let r = tape.scale(r, self.lambda / count)?;
                tape.add(hs, r)
            }
        }
    }

    /// Loss of flat `C x N` arrays.
    pub fn value(&self, recon: &[f64], truth: &[f64]) -> Result<f64> {
        ensure!(recon.len() == truth.len(), Shape, "reconstruction and truth differ in size");
        let diff: Vec<f64> = recon.iter().zip(truth).map(|(a, b)| a - b).collect();
        let hs = diff.iter().map(|d| d * d).sum::<f64>();
        match &self.grad_op {
            None => Ok(hs),
            Some(op) => Ok(hs + self.lambda * sobolev_mse(op, &diff)?),
        }
    }
}

/// Mean squared finite-difference gradient of a flat `C x N` field.
fn sobolev_mse(op: &SparseMatrix, diff: &[f64]) -> Result<f64> {
    ensure!(diff.len().is_multiple_of(op.cols), Shape, "field length is not a multiple of N");
    let mut g = vec![0.0; op.rows];
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in diff.chunks(op.cols) {
        op.apply(ch, &mut g);
        acc += g.iter().map(|v| v * v).sum::<f64>();
        count += op.rows;
    }
    Ok(acc / count as f64)
}

/// Mean squared mismatch of the finite-difference gradients of two fields on a grid.
pub fn sobolev_penalty(mesh: &Mesh, recon: &[f64], truth: &[f64]) -> Result<f64> {
    ensure!(recon.len() == truth.len(), Shape, "reconstruction and truth differ in size");
    let op = fd_gradient_operator(mesh)?;
    let diff: Vec<f64> = recon.iter().zip(truth).map(|(a, b)| a - b).collect();
    sobolev_mse(&op, &diff)
}
