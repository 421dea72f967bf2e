use nalgebra::DMatrix;

use super::metrics::relative_error;
use crate::data::FieldSeries;
use crate::error::{ensure, Result};

/// Orthonormal rank-`r` basis of the snapshot space, columns of length `C N`.
#[derive(Debug, Clone)]
pub struct PodBasis {
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

/// Snapshot matrix with one column per selected sample.
pub fn snapshot_matrix(series: &FieldSeries, samples: &[usize]) -> DMatrix<f64> {
    let m = series.sample_len();
    DMatrix::from_fn(m, samples.len(), |i, j| series.sample(samples[j])[i])
}

impl PodBasis {
    /// Leading `rank` left singular vectors of the snapshot matrix of `samples`.
    pub fn fit(series: &FieldSeries, samples: &[usize], rank: usize) -> Result<Self> {
        Self::from_snapshots(snapshot_matrix(series, samples), rank)
    }

    pub fn from_snapshots(x: DMatrix<f64>, rank: usize) -> Result<Self> {
        let limit = x.nrows().min(x.ncols());
        ensure!(
            rank >= 1 && rank <= limit,
            Config,
            "POD rank {rank} must lie in 1..={limit} (min of snapshot count and sample length)"
        );
        let svd = x.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let basis = DMatrix::from_fn(u.nrows(), rank, |i, j| u[(i, order[j])]);
        Ok(PodBasis {
            basis,
            singular_values: order.iter().map(|&k| svd.singular_values[k]).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// All singular values of the snapshot matrix, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Coefficients `U^T x` of one flat sample.
    pub fn encode(&self, sample: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            sample.len() == self.basis.nrows(),
            Shape,
            "sample has {} values, basis expects {}",
            sample.len(),
            self.basis.nrows()
        );
        Ok((0..self.rank())
            .map(|j| self.basis.column(j).iter().zip(sample).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn decode(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        ensure!(coeffs.len() == self.rank(), Shape, "expected {} coefficients", self.rank());
        let mut out = vec![0.0; self.basis.nrows()];
        for (j, c) in coeffs.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(self.basis.column(j).iter()) {
                *o += c * u;
            }
        }
        Ok(out)
    }

    /// Orthogonal projection of every sample onto the basis.
    pub fn project_series(&self, series: &FieldSeries) -> Result<FieldSeries> {
        let samples = (0..series.samples())
            .map(|t| self.decode(&self.encode(series.sample(t))?))
            .collect::<Result<Vec<_>>>()?;
        FieldSeries::from_samples(series.channels(), series.points(), series.dt(), samples)
    }

    /// Time-averaged relative error of the projection.
    pub fn error(&self, series: &FieldSeries) -> Result<f64> {
        relative_error(&self.project_series(series)?, series)
    }

    /// Squared Frobenius norm of `X - U U^T X`.
    pub fn residual_sq(&self, x: &DMatrix<f64>) -> f64 {
        let coeffs = self.basis.transpose() * x;
        (x - &self.basis * coeffs).norm_squared()
    }

    /// Sum of squared singular values beyond the kept rank.
    pub fn tail_energy(&self) -> f64 {
        self.singular_values[self.rank()..].iter().map(|s| s * s).sum()
    }
}
