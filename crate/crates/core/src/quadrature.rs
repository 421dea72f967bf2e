//! Quadrature weights attached to the input points of a QuadConv layer.

use crate::error::{ensure, Error, Result};
use crate::mesh::{Mesh, MeshKind};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `v > 0`.
pub fn softplus_inv(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Static,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights {
    rho: Vec<f64>,
    raw: Option<Vec<f64>>,
}

impl QuadratureWeights {
    pub fn from_static(rho: Vec<f64>) -> Result<Self> {
        ensure!(!rho.is_empty(), Config, "empty weight vector");
        ensure!(
            rho.iter().all(|&r| r > 0.0 && r.is_finite()),
            Config,
            "static quadrature weights must be strictly positive"
        );
        Ok(QuadratureWeights { rho, raw: None })
    }

    /// Learned weights from unconstrained parameters, `rho = softplus(raw)`.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        ensure!(!raw.is_empty(), Config, "empty weight vector");
        let rho: Vec<f64> = raw.iter().map(|&r| softplus(r)).collect();
        ensure!(
            rho.iter().all(|&r| r > 0.0 && r.is_finite()),
            Training,
            "raw quadrature parameters produced non-positive weights"
        );
        Ok(QuadratureWeights { rho, raw: Some(raw) })
    }

    pub fn mode(&self) -> WeightMode {
        if self.raw.is_some() {
            WeightMode::Learned
        } else {
            WeightMode::Static
        }
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn raw(&self) -> Option<&[f64]> {
        self.raw.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Replaces the raw parameters of learned weights.
    pub fn set_raw(&mut self, raw: &[f64]) -> Result<()> {
        ensure!(
            self.raw.is_some(),
            Contract,
            "static weights have no raw parameters"
        );
        ensure!(raw.len() == self.rho.len(), Shape, "raw length mismatch");
        *self = QuadratureWeights::from_raw(raw.to_vec())?;
        Ok(())
    }
}

/// Composite trapezoid weights along one axis of `n` nodes with spacing `h`.
fn trapezoid_1d(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Tensor-product composite trapezoid weights on a uniform grid.
pub fn newton_cotes_weights(mesh: &Mesh) -> Result<QuadratureWeights> {
    let (n, extent) = match mesh.kind() {
        MeshKind::UniformGrid { n_per_dim, extent } => (n_per_dim, extent),
        MeshKind::Scattered => {
            return Err(Error::UnsupportedMesh(
                "Newton-Cotes weights need a uniform grid".into(),
            ))
        }
    };
    let w1 = trapezoid_1d(n, extent / (n - 1) as f64);
    let dim = mesh.dim();
    let rho = (0..mesh.len())
        .map(|flat| {
            let mut rem = flat;
            let mut w = 1.0;
            for _ in 0..dim {
                w *= w1[rem % n];
                rem /= n;
            }
            w
        })
        .collect();
    QuadratureWeights::from_static(rho)
}

/// Learned weights starting from the static rule on grids, or an equal split of
/// `fallback_volume` on scattered meshes.
pub fn init_learned_weights(mesh: &Mesh, fallback_volume: f64) -> Result<QuadratureWeights> {
    ensure!(
        fallback_volume > 0.0 && fallback_volume.is_finite(),
        Config,
        "fallback volume must be positive"
    );
    let start: Vec<f64> = if mesh.is_grid() {
        newton_cotes_weights(mesh)?.rho
    } else {
        vec![fallback_volume / mesh.len() as f64; mesh.len()]
    };
    QuadratureWeights::from_raw(start.into_iter().map(softplus_inv).collect())
}
