//! The QuadConv layer.
//!
//! For output point `y_j` the layer computes
//!
//! ```text
//! out[:, j] = sum_{i in map[j]} rho_i * G(y_j - x_i) * f_i,    G(z) = bump(z) H(z)
//! ```
//!
//! where `map[j]` is the cached support list of `j`. Filter matrices are
//! re-evaluated on every pass because they depend on trainable parameters;
//! the support map and the offsets `y_j - x_i` are mesh-static and computed once.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::index_map::{build_index_map_bucketed, distance, IndexMap, OpCounter};
use crate::kernel::{bump_at_norm, BumpParams, KernelMlp};
use crate::mesh::Mesh;
use crate::quadrature::{QuadratureWeights, WeightMode};

/// A filter `H` fixed by a closure rather than learned.
#[derive(Clone)]
pub struct FixedKernel {
    pub rows: usize,
    pub cols: usize,
    pub f: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for FixedKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedKernel({}x{})", self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
pub enum FilterKernel {
    Mlp(KernelMlp),
    Fixed(FixedKernel),
}

impl FilterKernel {
    fn rows(&self) -> usize {
        match self {
            FilterKernel::Mlp(m) => m.out_rows(),
            FilterKernel::Fixed(k) => k.rows,
        }
    }

    fn cols(&self) -> usize {
        match self {
            FilterKernel::Mlp(m) => m.out_cols(),
            FilterKernel::Fixed(k) => k.cols,
        }
    }
}

/// Fixed reparameterisation `G(z) = output * bump(z) * H(input * z)`.
///
/// Any `H` can absorb these constants, so the function class is unchanged; it
/// only keeps the MLP's inputs in the unit ball and its outputs at unit scale
/// regardless of mesh spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelScaling {
    pub input: f64,
    pub output: f64,
}

impl Default for KernelScaling {
    fn default() -> Self {
        KernelScaling {
            input: 1.0,
            output: 1.0,
        }
    }
}

impl KernelScaling {
    /// Inputs divided by `alpha`, outputs by the volume of the `alpha`-ball.
    pub fn normalized(alpha: f64, dim: usize) -> Self {
        let unit_ball = match dim {
            1 => 2.0,
            2 => std::f64::consts::PI,
            3 => 4.0 / 3.0 * std::f64::consts::PI,
            _ => 1.0,
        };
        KernelScaling {
            input: 1.0 / alpha,
            output: 1.0 / (unit_ball * alpha.powi(dim as i32)),
        }
    }
}

/// Tape handles of a layer's parameters for one recording.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub theta: Option<Var>,
    pub rho: Var,
    pub raw: Option<Var>,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct QuadConvLayer {
    input_mesh: Arc<Mesh>,
    output_mesh: Arc<Mesh>,
    in_channels: usize,
    out_channels: usize,
    bump: BumpParams,
    kernel: FilterKernel,
    weights: QuadratureWeights,
    map: Arc<IndexMap>,
    scaling: KernelScaling,
    /// Scaled offsets `input * (y_j - x_i)`, one row per map pair.
    offsets: Arc<Vec<f64>>,
    /// `output * bump(y_j - x_i)` per map pair.
    window: Arc<Vec<f64>>,
    /// Distinct rows of `offsets` (up to rounding) and, when there are fewer
    /// of them than pairs, the distinct row each pair uses.
    unique: Arc<Vec<f64>>,
    pair_unique: Option<Arc<Vec<usize>>>,
    bias: Option<Vec<f64>>,
}

impl QuadConvLayer {
    /// Assembles a layer around an existing support map, verifying that the map
    /// fits the meshes and that every listed pair lies inside the support.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input_mesh: Arc<Mesh>,
        output_mesh: Arc<Mesh>,
        in_channels: usize,
        out_channels: usize,
        bump: BumpParams,
        kernel: FilterKernel,
        weights: QuadratureWeights,
        map: Arc<IndexMap>,
    ) -> Result<Self> {
        ensure!(
            input_mesh.dim() == output_mesh.dim(),
            Shape,
            "input mesh is {}-D, output mesh {}-D",
            input_mesh.dim(),
            output_mesh.dim()
        );
        ensure!(
            kernel.rows() == out_channels && kernel.cols() == in_channels,
            Shape,
            "filter is {}x{}, layer maps {in_channels} to {out_channels} channels",
            kernel.rows(),
            kernel.cols()
        );
        if let FilterKernel::Mlp(m) = &kernel {
            ensure!(
                m.input_dim() == input_mesh.dim(),
                Shape,
                "kernel MLP takes {}-D offsets on a {}-D mesh",
                m.input_dim(),
                input_mesh.dim()
            );
        }
        ensure!(
            weights.len() == input_mesh.len(),
            Shape,
            "{} quadrature weights for {} input points",
            weights.len(),
            input_mesh.len()
        );
        ensure!(
            map.alpha() == bump.alpha(),
            Contract,
            "index map built for alpha={}, layer uses {}",
            map.alpha(),
            bump.alpha()
        );
        map.check_sizes(input_mesh.len(), output_mesh.len())?;
        let dim = input_mesh.dim();
        let alpha = bump.alpha();
        let mut offsets = Vec::with_capacity(map.nnz() * dim);
        let mut window = Vec::with_capacity(map.nnz());
        for j in 0..map.n_out() {
            let y = output_mesh.point(j);
            for &i in map.row(j) {
                let x = input_mesh.point(i as usize);
                let d = distance(y, x);
                ensure!(
                    d < alpha,
                    Contract,
                    "index map pair ({j}, {i}) lies outside the support radius"
                );
                window.push(bump_at_norm(d, alpha));
                offsets.extend(y.iter().zip(x).map(|(a, b)| a - b));
            }
        }
        let (unique, pair_unique) = dedupe_offsets(&offsets, dim, alpha);
        let mut layer = QuadConvLayer {
            input_mesh,
            output_mesh,
            in_channels,
            out_channels,
            bump,
            kernel,
            weights,
            map,
            scaling: KernelScaling::default(),
            offsets: Arc::new(offsets),
            window: Arc::new(window),
            unique: Arc::new(unique),
            pair_unique: pair_unique.map(Arc::new),
            bias: None,
        };
        layer.apply_scaling(KernelScaling::default());
        Ok(layer)
    }

    /// Builds the support map with the bucketed search and assembles the layer.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        input_mesh: Arc<Mesh>,
        output_mesh: Arc<Mesh>,
        in_channels: usize,
        out_channels: usize,
        alpha: f64,
        kernel: FilterKernel,
        weights: QuadratureWeights,
        counter: &OpCounter,
    ) -> Result<Self> {
        let map = build_index_map_bucketed(&input_mesh, &output_mesh, alpha, counter)?;
        Self::new(
            input_mesh,
            output_mesh,
            in_channels,
            out_channels,
            BumpParams::new(alpha)?,
            kernel,
            weights,
            Arc::new(map),
        )
    }

    pub fn with_scaling(mut self, scaling: KernelScaling) -> Self {
        self.apply_scaling(scaling);
        self
    }

    /// Adds a per-output-channel bias, initialised to zero.
    pub fn with_bias(mut self) -> Self {
        self.bias = Some(vec![0.0; self.out_channels]);
        self
    }

    fn apply_scaling(&mut self, scaling: KernelScaling) {
        let old = self.scaling;
        let rescale_in = scaling.input / old.input;
        let rescale_out = scaling.output / old.output;
        if rescale_in != 1.0 {
            self.offsets = Arc::new(self.offsets.iter().map(|v| v / old.input * scaling.input).collect());
            self.unique = Arc::new(self.unique.iter().map(|v| v / old.input * scaling.input).collect());
        }
        if rescale_out != 1.0 {
            self.window = Arc::new(self.window.iter().map(|v| v / old.output * scaling.output).collect());
        }
        self.scaling = scaling;
    }

    pub fn input_mesh(&self) -> &Arc<Mesh> {
        &self.input_mesh
    }

    pub fn output_mesh(&self) -> &Arc<Mesh> {
        &self.output_mesh
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn alpha(&self) -> f64 {
        self.bump.alpha()
    }

    pub fn bump(&self) -> &BumpParams {
        &self.bump
    }

    pub fn kernel(&self) -> &FilterKernel {
        &self.kernel
    }

    pub fn weights(&self) -> &QuadratureWeights {
        &self.weights
    }

    pub fn map(&self) -> &Arc<IndexMap> {
        &self.map
    }

    pub fn scaling(&self) -> KernelScaling {
        self.scaling
    }

    /// Number of distinct offsets the kernel network is evaluated at per pass.
    pub fn distinct_offsets(&self) -> usize {
        self.unique.len() / self.input_mesh.dim()
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// The filter matrix `G(z)` this layer applies to offset `z`, evaluated
    /// point-wise (no tape).
    pub fn filter(&self, z: &[f64], counter: &OpCounter) -> Result<Vec<f64>> {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b = bump_at_norm(norm, self.alpha());
        let len = self.out_channels * self.in_channels;
        if b == 0.0 {
            return Ok(vec![0.0; len]);
        }
        counter.add_kernel_evals(1);
        let zs: Vec<f64> = z.iter().map(|v| v * self.scaling.input).collect();
        let mut h = match &self.kernel {
            FilterKernel::Mlp(m) => m.eval(&zs)?,
            FilterKernel::Fixed(k) => (k.f)(&zs),
        };
        ensure!(h.len() == len, Shape, "filter returned {} values, expected {len}", h.len());
        h.iter_mut().for_each(|v| *v *= b * self.scaling.output);
        Ok(h)
    }

    /// Trainable parameter vectors in a fixed order: kernel parameters (MLP
    /// only), raw quadrature parameters (learned weights only), bias (if any).
    pub fn param_vectors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        if let FilterKernel::Mlp(m) = &self.kernel {
            v.push(m.theta());
        }
        if let Some(raw) = self.weights.raw() {
            v.push(raw);
        }
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    /// Replaces the parameters, in the order of [`Self::param_vectors`].
    pub fn set_param_vectors(&mut self, params: &[Vec<f64>]) -> Result<()> {
        let expected = self.param_vectors().len();
        ensure!(
            params.len() == expected,
            Shape,
            "layer has {expected} parameter vectors, got {}",
            params.len()
        );
        let mut it = params.iter();
        if let FilterKernel::Mlp(m) = &mut self.kernel {
            m.set_theta(it.next().unwrap())?;
        }
        if self.weights.mode() == WeightMode::Learned {
            self.weights.set_raw(it.next().unwrap())?;
        }
        if let Some(b) = &mut self.bias {
            let nb = it.next().unwrap();
            ensure!(nb.len() == b.len(), Shape, "bias length mismatch");
            b.copy_from_slice(nb);
        }
        Ok(())
    }

    /// Puts this layer's parameters on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<LayerVars> {
        let theta = match &self.kernel {
            FilterKernel::Mlp(m) => {
                Some(tape.leaf(Tensor::new(&[m.theta().len()], m.theta().to_vec())?, trainable))
            }
            FilterKernel::Fixed(_) => None,
        };
        let (rho, raw) = match self.weights.raw() {
            Some(raw) => {
                let r = tape.leaf(Tensor::new(&[raw.len()], raw.to_vec())?, trainable);
                (tape.softplus(r)?, Some(r))
            }
            None => {
                let rho = self.weights.rho();
                (tape.constant(Tensor::new(&[rho.len()], rho.to_vec())?), None)
            }
        };
        let bias = match &self.bias {
            Some(b) => Some(tape.leaf(Tensor::new(&[b.len()], b.clone())?, trainable)),
            None => None,
        };
        Ok(LayerVars {
            theta,
            rho,
            raw,
            bias,
        })
    }

    /// Records the filter matrices of every map pair: a `P x (C_out * C_in)`
    /// tensor in map order.
    pub fn record_filters(&self, tape: &mut Tape, vars: &LayerVars, counter: &OpCounter) -> Result<Var> {
        let p = self.map.nnz();
        let dim = self.input_mesh.dim();
        counter.add_kernel_evals(p as u64);
        let h = match &self.kernel {
            FilterKernel::Mlp(m) => {
                let theta = vars
                    .theta
                    .ok_or_else(|| Error::Contract("MLP kernel bound without parameters".into()))?;
                let rows = self.unique.len() / dim;
                let mut x = tape.constant(Tensor::new(&[rows, dim], self.unique.to_vec())?);
                let slots = m.slots();
                let last = slots.len() - 1;
                for (l, s) in slots.iter().enumerate() {
                    let w = tape.slice(theta, s.weight, &[s.fan_out, s.fan_in])?;
                    let b = tape.slice(theta, s.bias, &[s.fan_out])?;
                    x = tape.matmul_t(x, w)?;
                    x = tape.add_bias(x, b)?;
                    if l != last {
                        x = tape.activation(x, m.activation())?;
                    }
                }
                match &self.pair_unique {
                    Some(idx) => tape.gather(x, idx.clone())?,
                    None => x,
                }
            }
            FilterKernel::Fixed(k) => {
                let len = k.rows * k.cols;
                let mut vals = Vec::with_capacity(p * len);
                for z in self.offsets.chunks_exact(dim) {
                    let h = (k.f)(z);
                    ensure!(h.len() == len, Shape, "fixed filter returned {} values, expected {len}", h.len());
                    vals.extend_from_slice(&h);
                }
                tape.constant(Tensor::new(&[p, len], vals)?)
            }
        };
        tape.scale_rows(h, self.window.clone())
    }

    /// Records the layer applied to a `C_in x N` feature matrix, reusing
    /// filters recorded with [`Self::record_filters`].
    pub fn record_apply(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        filters: Var,
        features: Var,
        counter: &OpCounter,
    ) -> Result<Var> {
        let shape = tape.value(features).shape();
        ensure!(
            shape == [self.in_channels, self.input_mesh.len()],
            Shape,
            "features of shape {shape:?}, layer expects [{}, {}]",
            self.in_channels,
            self.input_mesh.len()
        );
        counter.add_macs((self.map.nnz() * self.in_channels * self.out_channels) as u64);
        let out = tape.quadconv(features, filters, vars.rho, self.map.clone())?;
        match vars.bias {
            Some(b) => tape.add_channel_bias(out, b),
            None => Ok(out),
        }
    }

    /// Records filters and application in one go.
    pub fn record(&self, tape: &mut Tape, vars: &LayerVars, features: Var, counter: &OpCounter) -> Result<Var> {
        let filters = self.record_filters(tape, vars, counter)?;
        self.record_apply(tape, vars, filters, features, counter)
    }

    /// Same sum as [`Self::record_apply`], built from generic gather,
    /// row-wise mat-vec, row scaling and scatter-add primitives.
    pub fn record_apply_composed(&self, tape: &mut Tape, vars: &LayerVars, filters: Var, features: Var) -> Result<Var> {
        let inputs = Arc::new(self.map.indices().iter().map(|&i| i as usize).collect::<Vec<_>>());
        let rows = Arc::new(
            (0..self.map.n_out())
                .flat_map(|j| self.map.row_range(j).map(move |_| j))
                .collect::<Vec<_>>(),
        );
        let ft = tape.transpose(features)?;
        let fp = tape.gather(ft, inputs.clone())?;
        let rho_p = tape.gather(vars.rho, inputs)?;
        let rho_p = tape.reshape(rho_p, &[self.map.nnz(), 1])?;
        let contrib = tape.row_matvec(filters, fp, self.out_channels)?;
        let ones = tape.constant(Tensor::new(&[1, self.out_channels], vec![1.0; self.out_channels])?);
        let rho_b = tape.matmul(rho_p, ones)?;
        let weighted = tape.mul(contrib, rho_b)?;
        let summed = tape.scatter_add(weighted, rows, self.map.n_out())?;
        let out = tape.transpose(summed)?;
        match vars.bias {
            Some(b) => tape.add_channel_bias(out, b),
            None => Ok(out),
        }
    }

    /// Forward evaluation without gradient tracking.
    pub fn forward(&self, features: &Tensor, counter: &OpCounter) -> Result<Tensor> {
        ensure!(
            features.is_finite(),
            Contract,
            "features contain non-finite values"
        );
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let f = tape.constant(features.clone());
        let out = self.record(&mut tape, &vars, f, counter)?;
        Ok(tape.value(out).clone())
    }
}

/// Groups offsets that agree to within `alpha * 2^-36` per coordinate, so the
/// kernel network runs once per distinct offset. On uniform grids this turns
/// `N * S` evaluations into about `S`.
fn dedupe_offsets(offsets: &[f64], dim: usize, alpha: f64) -> (Vec<f64>, Option<Vec<usize>>) {
    let q = alpha * (-36f64).exp2();
    let mut seen: HashMap<Vec<i64>, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut pair = Vec::with_capacity(offsets.len() / dim.max(1));
    for z in offsets.chunks_exact(dim) {
        let key: Vec<i64> = z.iter().map(|v| (v / q).round() as i64).collect();
        let next = seen.len();
        let id = *seen.entry(key).or_insert_with(|| {
            unique.extend_from_slice(z);
            next
        });
        pair.push(id);
    }
    if seen.len() == pair.len() {
        (unique, None)
    } else {
        (unique, Some(pair))
    }
}

/// Gradient of `<proj, G(z)>` with respect to the kernel MLP parameters,
/// by reverse mode on a one-row tape.
pub fn filter_theta_grad(net: &KernelMlp, bump: &BumpParams, z: &[f64], proj: &[f64]) -> Result<Vec<f64>> {
    ensure!(z.len() == net.input_dim(), Shape, "offset has length {}, expected {}", z.len(), net.input_dim());
    ensure!(proj.len() == net.out_len(), Shape, "projection has length {}, expected {}", proj.len(), net.out_len());
    let mut tape = Tape::new();
    let theta = tape.param(Tensor::new(&[net.param_count()], net.theta().to_vec())?);
    let mut x = tape.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
    let slots = net.slots();
    let last = slots.len() - 1;
    for (l, s) in slots.iter().enumerate() {
        let w = tape.slice(theta, s.weight, &[s.fan_out, s.fan_in])?;
        let b = tape.slice(theta, s.bias, &[s.fan_out])?;
        x = tape.matmul_t(x, w)?;
        x = tape.add_bias(x, b)?;
        if l != last {
            x = tape.activation(x, net.activation())?;
        }
    }
    let g = tape.scale_rows(x, Arc::new(vec![bump.eval(z)]))?;
    let p = tape.constant(Tensor::new(&[1, proj.len()], proj.to_vec())?);
    let prod = tape.mul(g, p)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    Ok(tape.grad(theta).unwrap_or(&[]).to_vec())
}

/// Standard zero-padded discrete convolution of a `C x n^2` grid field with
/// a square `k x k` stencil per output/input channel pair.
///
/// `stencil` holds `C_out * C_in` row-major `k x k` blocks; entry `(u, v)` of
/// a block multiplies `f[a - (u - r), b - (v - r)]`, `r = k / 2`.
pub fn grid_equivalence_reference(
    features: &Tensor,
    stencil: &[f64],
    k: usize,
    out_channels: usize,
    side: usize,
) -> Result<Tensor> {
    let (c, n) = features.dims2()?;
    ensure!(k % 2 == 1, Config, "stencil size must be odd");
    ensure!(n == side * side, Shape, "{n} points is not a {side}x{side} grid");
    ensure!(
        stencil.len() == out_channels * c * k * k,
        Shape,
        "stencil has {} entries, expected {}",
        stencil.len(),
        out_channels * c * k * k
    );
    let r = (k / 2) as i64;
    let f = features.data();
    let mut out = vec![0.0; out_channels * n];
    for o in 0..out_channels {
        for ci in 0..c {
            let block = &stencil[(o * c + ci) * k * k..(o * c + ci + 1) * k * k];
            for a in 0..side as i64 {
                for b in 0..side as i64 {
                    let mut acc = 0.0;
                    for u in -r..=r {
                        for v in -r..=r {
                            let (sa, sb) = (a - u, b - v);
                            if sa < 0 || sb < 0 || sa >= side as i64 || sb >= side as i64 {
                                continue;
                            }
                            let w = block[((u + r) * k as i64 + (v + r)) as usize];
                            acc += w * f[ci * n + (sa * side as i64 + sb) as usize];
                        }
                    }
                    out[o * n + (a * side as i64 + b) as usize] += acc;
                }
            }
        }
    }
    Tensor::new(&[out_channels, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationReport {
    pub max_abs: f64,
    /// Largest output magnitude over the compared region.
    pub scale: f64,
    pub compared: usize,
}

impl TranslationReport {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.max_abs
        } else {
            self.max_abs / self.scale
        }
    }
}

fn grid_coords(flat: usize, dim: usize, side: usize) -> Vec<i64> {
    let mut rem = flat;
    let mut idx = vec![0i64; dim];
    for d in (0..dim).rev() {
        idx[d] = (rem % side) as i64;
        rem /= side;
    }
    idx
}

fn grid_flat(idx: &[i64], side: usize) -> Option<usize> {
    let mut flat = 0usize;
    for &k in idx {
        if k < 0 || k >= side as i64 {
            return None;
        }
        flat = flat * side + k as usize;
    }
    Some(flat)
}

/// Shifts a `C x side^D` grid field by an integer lattice vector, filling
/// with zeros: `out[k] = f[k - shift]`.
pub fn shift_grid_field(features: &Tensor, dim: usize, side: usize, shift: &[i64]) -> Result<Tensor> {
    let (c, n) = features.dims2()?;
    ensure!(shift.len() == dim, Shape, "shift has {} components on a {dim}-D grid", shift.len());
    ensure!(n == side.pow(dim as u32), Shape, "field is not on a {side}^{dim} grid");
    let mut out = vec![0.0; c * n];
    for flat in 0..n {
        let idx = grid_coords(flat, dim, side);
        let src: Vec<i64> = idx.iter().zip(shift).map(|(a, s)| a - s).collect();
        if let Some(s) = grid_flat(&src, side) {
            for ch in 0..c {
                out[ch * n + flat] = features.data()[ch * n + s];
            }
        }
    }
    Tensor::new(&[c, n], out)
}

/// Compares `forward(shift(f))` with `shift(forward(f))` on grid points whose
/// kernel support, and that of their pre-image, lies inside the grid.
pub fn translation_check(
    layer: &QuadConvLayer,
    features: &Tensor,
    shift: &[i64],
    counter: &OpCounter,
) -> Result<TranslationReport> {
    let (side, h) = layer
        .input_mesh()
        .grid_shape()
        .ok_or_else(|| Error::UnsupportedMesh("translation check needs a uniform grid".into()))?;
    ensure!(
        layer.input_mesh() == layer.output_mesh() || **layer.input_mesh() == **layer.output_mesh(),
        Contract,
        "translation check needs identical input and output meshes"
    );
    let dim = layer.input_mesh().dim();
    let margin = (layer.alpha() / h).ceil() as i64;
    let base = layer.forward(features, counter)?;
    let shifted_in = shift_grid_field(features, dim, side, shift)?;
    let moved = layer.forward(&shifted_in, counter)?;
    let (co, n) = base.dims2()?;
    let inside = |idx: &[i64]| idx.iter().all(|&k| k >= margin && k < side as i64 - margin);
    let mut report = TranslationReport {
        max_abs: 0.0,
        scale: 0.0,
        compared: 0,
    };
    for flat in 0..n {
        let idx = grid_coords(flat, dim, side);
        let pre: Vec<i64> = idx.iter().zip(shift).map(|(a, s)| a - s).collect();
        if !inside(&idx) || !inside(&pre) {
            continue;
        }
        let src = grid_flat(&pre, side).unwrap();
        for o in 0..co {
            let a = moved.data()[o * n + flat];
            let b = base.data()[o * n + src];
            report.max_abs = report.max_abs.max((a - b).abs());
            report.scale = report.scale.max(b.abs());
        }
        report.compared += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Activation;
    use crate::mesh::{nonuniform_mesh, uniform_grid, Density};
    use crate::quadrature::{init_learned_weights, newton_cotes_weights};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed(rows: usize, cols: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> FilterKernel {
        FilterKernel::Fixed(FixedKernel {
            rows,
            cols,
            f: Arc::new(f),
        })
    }

    #[test]
    fn single_term() {
        let m = Arc::new(Mesh::from_points(1, vec![0.0]).unwrap());
        let w = QuadratureWeights::from_static(vec![2.0]).unwrap();
        let mut net = KernelMlp::zeros(1, &[], Activation::Tanh, 1, 1).unwrap();
        net.set_theta(&[0.0, 0.5]).unwrap();
        let layer = QuadConvLayer::build(m.clone(), m, 1, 1, 1.0, FilterKernel::Mlp(net), w, &OpCounter::new()).unwrap();
        let out = layer.forward(&Tensor::new(&[1, 1], vec![3.0]).unwrap(), &OpCounter::new()).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn zero_in_zero_out() {
        let g = Arc::new(uniform_grid(2, 6, 1.0).unwrap());
        let net = KernelMlp::init(2, &[8], Activation::Tanh, 3, 2, 1).unwrap();
        let layer = QuadConvLayer::build(
            g.clone(),
            g.clone(),
            2,
            3,
            0.3,
            FilterKernel::Mlp(net),
            newton_cotes_weights(&g).unwrap(),
            &OpCounter::new(),
        )
        .unwrap();
        let out = layer.forward(&Tensor::zeros(&[2, 36]), &OpCounter::new()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[3, 36]);
    }

    #[test]
    fn shape_and_map_checks() {
        let g = Arc::new(uniform_grid(1, 5, 1.0).unwrap());
        let net = KernelMlp::init(1, &[4], Activation::Tanh, 1, 1, 1).unwrap();
        let layer = QuadConvLayer::build(
            g.clone(),
            g.clone(),
            1,
            1,
            0.3,
            FilterKernel::Mlp(net.clone()),
            newton_cotes_weights(&g).unwrap(),
            &OpCounter::new(),
        )
        .unwrap();
        let bad = layer.forward(&Tensor::zeros(&[2, 5]), &OpCounter::new());
        assert!(matches!(bad, Err(Error::Shape(_))));

        let other = Arc::new(uniform_grid(1, 7, 1.0).unwrap());
        let wrong_map = build_index_map_bucketed(&other, &other, 0.3, &OpCounter::new()).unwrap();
        let r = QuadConvLayer::new(
            g.clone(),
            g.clone(),
            1,
            1,
            BumpParams::new(0.3).unwrap(),
            FilterKernel::Mlp(net),
            newton_cotes_weights(&g).unwrap(),
            Arc::new(wrong_map),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn counters_follow_map() {
        let m = Arc::new(nonuniform_mesh(80, Density::Uniform, 3).unwrap());
        let net = KernelMlp::init(2, &[6], Activation::Tanh, 2, 3, 4).unwrap();
        let layer = QuadConvLayer::build(
            m.clone(),
            m.clone(),
            3,
            2,
            0.2,
            FilterKernel::Mlp(net),
            init_learned_weights(&m, 1.0).unwrap(),
            &OpCounter::new(),
        )
        .unwrap();
        let c = OpCounter::new();
        layer.forward(&Tensor::zeros(&[3, 80]), &c).unwrap();
        assert_eq!(c.kernel_evals() as usize, layer.map().nnz());
        assert!(c.kernel_evals() < 80 * 80);
        assert_eq!(c.macs() as usize, layer.map().nnz() * 6);
    }

    #[test]
    fn lowpass_1d_matches_weighted_sum() {
        let g = Arc::new(uniform_grid(1, 41, 2.0).unwrap());
        let sinc = |z: &[f64]| {
            let x = z[0];
            vec![if x == 0.0 { 64.0 } else { 8.0 * (8.0 * std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) }]
        };
        let alpha = 0.4;
        let w = newton_cotes_weights(&g).unwrap();
        let layer = QuadConvLayer::build(g.clone(), g.clone(), 1, 1, alpha, fixed(1, 1, sinc), w.clone(), &OpCounter::new()).unwrap();
        let f: Vec<f64> = g.iter().map(|p| (std::f64::consts::PI * p[0]).sin() + (14.0 * std::f64::consts::PI * p[0]).sin()).collect();
        let out = layer.forward(&Tensor::new(&[1, 41], f.clone()).unwrap(), &OpCounter::new()).unwrap();
        for j in 0..41 {
            let y = g.point(j)[0];
            let mut acc = 0.0;
            for i in 0..41 {
                let x = g.point(i)[0];
                let z = y - x;
                acc += w.rho()[i] * f[i] * crate::kernel::bump(&[z], alpha) * sinc(&[z])[0];
            }
            assert_relative_eq!(out.data()[j], acc, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn fused_and_composed_agree_with_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Arc::new(nonuniform_mesh(60, Density::Uniform, 9).unwrap());
        let out_mesh = Arc::new(nonuniform_mesh(25, Density::Uniform, 10).unwrap());
        let net = KernelMlp::init(2, &[5], Activation::Tanh, 3, 2, 2).unwrap();
        let layer = QuadConvLayer::build(
            m.clone(),
            out_mesh,
            2,
            3,
            0.25,
            FilterKernel::Mlp(net),
            init_learned_weights(&m, 1.0).unwrap(),
            &OpCounter::new(),
        )
        .unwrap()
        .with_bias();
        let f: Vec<f64> = (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |composed: bool| {
            let mut tape = Tape::new();
            let vars = layer.bind(&mut tape, true).unwrap();
            let x = tape.param(Tensor::new(&[2, 60], f.clone()).unwrap());
            let k = layer.record_filters(&mut tape, &vars, &OpCounter::new()).unwrap();
            let out = if composed {
                layer.record_apply_composed(&mut tape, &vars, k, x).unwrap()
            } else {
                layer.record_apply(&mut tape, &vars, k, x, &OpCounter::new()).unwrap()
            };
            let loss = tape.sum_squares(out).unwrap();
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> = [Some(x), vars.theta, vars.raw, vars.bias]
                .iter()
                .flatten()
                .map(|v| tape.grad(*v).unwrap().to_vec())
                .collect();
            (tape.value(out).data().to_vec(), grads)
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12, epsilon = 1e-14);
        }
        for (u, v) in ga.iter().zip(&gb) {
            for (x, y) in u.iter().zip(v) {
                assert_relative_eq!(*x, *y, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn params_roundtrip() {
        let m = Arc::new(uniform_grid(2, 4, 1.0).unwrap());
        let net = KernelMlp::init(2, &[3], Activation::Tanh, 1, 1, 0).unwrap();
        let mut layer = QuadConvLayer::build(
            m.clone(),
            m.clone(),
            1,
            1,
            0.5,
            FilterKernel::Mlp(net),
            init_learned_weights(&m, 1.0).unwrap(),
            &OpCounter::new(),
        )
        .unwrap();
        let mut p: Vec<Vec<f64>> = layer.param_vectors().iter().map(|v| v.to_vec()).collect();
        assert_eq!(p.len(), 2);
        p[1][0] = -3.0;
        layer.set_param_vectors(&p).unwrap();
        assert_eq!(layer.weights().rho()[0], crate::quadrature::softplus(-3.0));
    }

    #[test]
    fn reference_identity_and_average() {
        let side = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::new(&[1, 36], (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut id = vec![0.0; 9];
        id[4] = 1.0;
        let out = grid_equivalence_reference(&f, &id, 3, 1, side).unwrap();
        assert_eq!(out.data(), f.data());
        let avg = vec![1.0 / 9.0; 9];
        let c = Tensor::new(&[1, 36], vec![2.0; 36]).unwrap();
        let out = grid_equivalence_reference(&c, &avg, 3, 1, side).unwrap();
        for a in 1..5 {
            for b in 1..5 {
                assert_relative_eq!(out.data()[a * 6 + b], 2.0, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn translation_trivial_cases() {
        let g = Arc::new(uniform_grid(2, 10, 1.0).unwrap());
        let h = 1.0 / 9.0;
        let net = KernelMlp::init(2, &[6], Activation::Tanh, 1, 1, 3).unwrap();
        let w = QuadratureWeights::from_static(vec![h * h; 100]).unwrap();
        let layer = QuadConvLayer::build(g.clone(), g.clone(), 1, 1, 1.5 * h, FilterKernel::Mlp(net), w, &OpCounter::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::new(&[1, 100], (0..100).map(|_| rng.gen::<f64>()).collect()).unwrap();
        assert_eq!(layer.distinct_offsets(), 9);
        let r = translation_check(&layer, &f, &[0, 0], &OpCounter::new()).unwrap();
        assert_eq!(r.max_abs, 0.0);
        assert!(r.compared > 0);
        let c = Tensor::new(&[1, 100], vec![1.5; 100]).unwrap();
        let r = translation_check(&layer, &c, &[2, -1], &OpCounter::new()).unwrap();
        assert!(r.relative() <= 1e-12, "{r:?}");
    }
}
