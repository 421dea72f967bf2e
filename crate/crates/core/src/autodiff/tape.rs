//! Tensor-level reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes only ever refer to earlier nodes, so walking the
//! list backwards from the loss is a valid reverse topological order.

use std::sync::Arc;

use rayon::prelude::*;

use super::pool;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};
use crate::index_map::IndexMap;
use crate::kernel::Activation;
use crate::quadrature::softplus_grad;

/// Arithmetic precision of recorded values. `Single` rounds every op output to
/// the nearest `f32`, emulating single-precision storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" | "double" => Ok(Precision::Double),
            "f32" | "single" => Ok(Precision::Single),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Double => "f64",
            Precision::Single => "f32",
        }
    }

    pub fn round(self, v: &mut [f64]) {
        if self == Precision::Single {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Compressed sparse rows of a constant linear operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_start: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(rows: usize, cols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_start = vec![0; rows + 1];
        for &(r, _, _) in &t {
            row_start[r + 1] += 1;
        }
        for r in 0..rows {
            row_start[r + 1] += row_start[r];
        }
        SparseMatrix {
            rows,
            cols,
            row_start,
            col: t.iter().map(|x| x.1).collect(),
            val: t.iter().map(|x| x.2).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_start[r]..self.row_start[r + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            y[r] = acc;
        }
    }

    /// `x += A^T y`
    pub fn apply_transpose_acc(&self, y: &[f64], x: &mut [f64]) {
        for r in 0..self.rows {
            for k in self.row_start[r]..self.row_start[r + 1] {
                x[self.col[k]] += self.val[k] * y[r];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Slice(Var, usize),
    AddChannelBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Sum(Var),
    SumSquares(Var),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    ScaleRows(Var, Arc<Vec<f64>>),
    RowMatVec(Var, Var),
    QuadConv {
        features: Var,
        kernel: Var,
        rho: Var,
        map: Arc<IndexMap>,
    },
    MaxPool(Var, Vec<usize>),
    Unpool {
        input: Var,
        channels: usize,
        dim: usize,
        coarse_side: usize,
        window: usize,
    },
    Sparse(Var, Arc<SparseMatrix>),
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    precision: Precision,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{what}: shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// `c = a * b + beta * c` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided extents read and
    // written, checked just above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.precision.round(value.data_mut());
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Adds an input tensor. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round(value.data_mut());
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass (accumulated over passes for leaves).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- forward primitives ----

    /// `(m x k) * (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        ensure!(k == k2, Shape, "matmul: {m}x{k} times {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `(m x k) * (n x k)^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        ensure!(k == k2, Shape, "matmul_t: {m}x{k} times ({n}x{k2})^T");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), &[a, b]))
    }

    /// Contiguous run of a tensor's values, starting at `offset`, viewed with `shape`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure!(
            offset + n <= self.value(a).len(),
            Shape,
            "slice {offset}..{} of a {}-element tensor",
            offset + n,
            self.value(a).len()
        );
        let t = Tensor::new(shape, self.value(a).data()[offset..offset + n].to_vec())?;
        Ok(self.push(t, Op::Slice(a, offset), &[a]))
    }

    /// Adds `bias[r]` to every entry of row `r` of a matrix.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(
            self.value(bias).len() == m,
            Shape,
            "channel bias of length {} for {m} rows",
            self.value(bias).len()
        );
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for (row, bv) in data.chunks_exact_mut(n).zip(b) {
            row.iter_mut().for_each(|x| *x += bv);
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::AddChannelBias(a, bias), &[a, bias]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(
            self.value(bias).len() == n,
            Shape,
            "bias of length {} for {m}x{n} matrix",
            self.value(bias).len()
        );
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            add_into(row, b);
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| x * s).collect())?;
        Ok(self.push(t, Op::Scale(a, s), &[a]))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| act.apply(*x)).collect())?;
        Ok(self.push(t, Op::Act(a, act), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn row_len(&self, a: Var) -> Result<(usize, usize)> {
        let shape = self.value(a).shape();
        ensure!(!shape.is_empty(), Shape, "cannot index rows of a scalar");
        Ok((shape[0], shape[1..].iter().product()))
    }

    /// Selects rows (first-axis slices): `out[k] = a[indices[k]]`.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, w) = self.row_len(a)?;
        ensure!(
            indices.iter().all(|&i| i < rows),
            Shape,
            "gather index out of range for {rows} rows"
        );
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices.iter() {
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Gather(a, indices), &[a]))
    }

    /// Sums rows into `out_rows` buckets: `out[indices[k]] += a[k]`.
    pub fn scatter_add(&mut self, a: Var, indices: Arc<Vec<usize>>, out_rows: usize) -> Result<Var> {
        let (rows, w) = self.row_len(a)?;
        ensure!(
            indices.len() == rows,
            Shape,
            "scatter_add: {} indices for {rows} rows",
            indices.len()
        );
        ensure!(
            indices.iter().all(|&i| i < out_rows),
            Shape,
            "scatter_add index out of range for {out_rows} rows"
        );
        let src = self.value(a).data();
        let mut out = vec![0.0; out_rows * w];
        for (k, &i) in indices.iter().enumerate() {
            add_into(&mut out[i * w..(i + 1) * w], &src[k * w..(k + 1) * w]);
        }
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = out_rows;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ScatterAdd(a, indices), &[a]))
    }

    /// Multiplies row `r` by the constant `scales[r]`.
    pub fn scale_rows(&mut self, a: Var, scales: Arc<Vec<f64>>) -> Result<Var> {
        let (rows, w) = self.row_len(a)?;
        ensure!(scales.len() == rows, Shape, "scale_rows: {} scales for {rows} rows", scales.len());
        let mut data = self.value(a).data().to_vec();
        if w > 0 {
            for (row, s) in data.chunks_exact_mut(w).zip(scales.iter()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::ScaleRows(a, scales), &[a]))
    }

    /// Row-wise matrix-vector products: `out[p] = K[p] x[p]` where `K[p]` is the
    /// `o x c` row-major matrix stored in row `p` of `k` (shape `P x (o*c)`).
    pub fn row_matvec(&mut self, k: Var, x: Var, out_dim: usize) -> Result<Var> {
        let (p, oc) = self.value(k).dims2()?;
        let (p2, c) = self.value(x).dims2()?;
        ensure!(
            p == p2 && oc == out_dim * c,
            Shape,
            "row_matvec: kernel {p}x{oc}, vectors {p2}x{c}, out {out_dim}"
        );
        let kd = self.value(k).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; p * out_dim];
        for r in 0..p {
            let xr = &xd[r * c..(r + 1) * c];
            for o in 0..out_dim {
                let kr = &kd[r * oc + o * c..r * oc + (o + 1) * c];
                out[r * out_dim + o] = kr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        let t = Tensor::new(&[p, out_dim], out)?;
        Ok(self.push(t, Op::RowMatVec(k, x), &[k, x]))
    }

    /// Fused quadrature convolution over a support map:
    /// `out[o, j] = sum_{p in row j} rho[i_p] * sum_c K[p, o, c] * F[c, i_p]`.
    ///
    /// `features` is `C x N`, `kernel` is `P x (Co*C)` in map order, `rho` has
    /// length `N`; the result is `Co x N_out`.
    pub fn quadconv(&mut self, features: Var, kernel: Var, rho: Var, map: Arc<IndexMap>) -> Result<Var> {
        let (c, n) = self.value(features).dims2()?;
        let (p, oc) = self.value(kernel).dims2()?;
        ensure!(
            p == map.nnz(),
            Contract,
            "kernel has {p} rows but the index map has {} pairs",
            map.nnz()
        );
        ensure!(c > 0 && oc % c == 0, Shape, "kernel width {oc} not a multiple of {c} channels");
        ensure!(
            self.value(rho).len() == n,
            Shape,
            "{} quadrature weights for {n} input points",
            self.value(rho).len()
        );
        map.check_sizes(n, map.n_out())?;
        let co = oc / c;
        let n_out = map.n_out();
        let f = self.value(features).data();
        let k = self.value(kernel).data();
        let r = self.value(rho).data();
        // Point-major copy of the features for contiguous per-point access.
        let mut ft = vec![0.0; n * c];
        for ch in 0..c {
            for i in 0..n {
                ft[i * c + ch] = f[ch * n + i];
            }
        }
        let cols: Vec<Vec<f64>> = (0..n_out)
            .into_par_iter()
            .with_min_len(64)
            .map(|j| {
                let mut acc = vec![0.0; co];
                for pi in map.row_range(j) {
                    let i = map.indices()[pi] as usize;
                    let fi = &ft[i * c..(i + 1) * c];
                    let kp = &k[pi * oc..(pi + 1) * oc];
                    for (o, a) in acc.iter_mut().enumerate() {
                        let dot: f64 = kp[o * c..(o + 1) * c].iter().zip(fi).map(|(x, y)| x * y).sum();
                        *a += r[i] * dot;
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; co * n_out];
        for (j, col) in cols.iter().enumerate() {
            for o in 0..co {
                out[o * n_out + j] = col[o];
            }
        }
        let t = Tensor::new(&[co, n_out], out)?;
        Ok(self.push(
            t,
            Op::QuadConv {
                features,
                kernel,
                rho,
                map,
            },
            &[features, kernel, rho],
        ))
    }

    /// Grid max pooling of a `C x side^D` field.
    pub fn maxpool_grid(&mut self, a: Var, dim: usize, side: usize, window: usize) -> Result<Var> {
        let (c, _) = self.value(a).dims2()?;
        let (v, arg) = pool::maxpool_grid(self.value(a).data(), c, dim, side, window)?;
        let m = v.len() / c;
        let t = Tensor::new(&[c, m], v)?;
        Ok(self.push(t, Op::MaxPool(a, arg), &[a]))
    }

    /// Nearest-neighbour replication of a `C x coarse_side^D` field.
    pub fn unpool_grid(&mut self, a: Var, dim: usize, coarse_side: usize, window: usize) -> Result<Var> {
        let (c, _) = self.value(a).dims2()?;
        let v = pool::unpool_grid(self.value(a).data(), c, dim, coarse_side, window)?;
        let n = v.len() / c;
        let t = Tensor::new(&[c, n], v)?;
        Ok(self.push(
            t,
            Op::Unpool {
                input: a,
                channels: c,
                dim,
                coarse_side,
                window,
            },
            &[a],
        ))
    }

    /// Applies a constant sparse operator to every row of a `C x N` matrix,
    /// giving `C x R`.
    pub fn sparse_apply(&mut self, a: Var, m: Arc<SparseMatrix>) -> Result<Var> {
        let (c, n) = self.value(a).dims2()?;
        ensure!(n == m.cols, Shape, "sparse operator has {} columns, input {n}", m.cols);
        let mut out = vec![0.0; c * m.rows];
        let src = self.value(a).data();
        for ch in 0..c {
            m.apply(&src[ch * n..(ch + 1) * n], &mut out[ch * m.rows..(ch + 1) * m.rows]);
        }
        let t = Tensor::new(&[c, m.rows], out)?;
        Ok(self.push(t, Op::Sparse(a, m), &[a]))
    }

    // ---- reverse pass ----

    /// Propagates `d loss / d node` to every node that requires gradients.
    /// Intermediate gradients are recomputed; leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] || matches!(self.ops[idx], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn gbuf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let op = self.ops[idx].clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.values[a.0].dims2().unwrap();
                let n = self.values[b.0].shape()[1];
                if self.requires[a.0] {
                    let bv = self.values[b.0].data().to_vec();
                    let ga = self.gbuf(a).unwrap();
                    gemm(m, n, k, g, (n as isize, 1), &bv, (1, n as isize), 1.0, ga);
                }
                if self.requires[b.0] {
                    let av = self.values[a.0].data().to_vec();
                    let gb = self.gbuf(b).unwrap();
                    gemm(k, m, n, &av, (1, k as isize), g, (n as isize, 1), 1.0, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.values[a.0].dims2().unwrap();
                let n = self.values[b.0].shape()[0];
                if self.requires[a.0] {
                    let bv = self.values[b.0].data().to_vec();
                    let ga = self.gbuf(a).unwrap();
                    gemm(m, n, k, g, (n as isize, 1), &bv, (k as isize, 1), 1.0, ga);
                }
                if self.requires[b.0] {
                    let av = self.values[a.0].data().to_vec();
                    let gb = self.gbuf(b).unwrap();
                    gemm(n, m, k, g, (1, n as isize), &av, (k as isize, 1), 1.0, gb);
                }
            }
            Op::Slice(a, offset) => {
                let ga = self.gbuf(a).unwrap();
                add_into(&mut ga[offset..offset + g.len()], g);
            }
            Op::AddChannelBias(a, b) => {
                let n = self.values[a.0].shape()[1];
                if let Some(ga) = self.gbuf(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.gbuf(b) {
                    for (d, row) in gb.iter_mut().zip(g.chunks_exact(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.gbuf(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.gbuf(b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.gbuf(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.gbuf(b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                if let Some(ga) = self.gbuf(a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.gbuf(b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddBias(a, b) => {
                let n = self.values[b.0].len();
                if let Some(ga) = self.gbuf(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.gbuf(b) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.gbuf(a) {
                    ga.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                }
            }
            Op::Act(a, act) => {
                let x = self.values[a.0].data().to_vec();
                let y = self.values[idx].data().to_vec();
                let ga = self.gbuf(a).unwrap();
                for k in 0..ga.len() {
                    let d = match act {
                        Activation::Tanh => 1.0 - y[k] * y[k],
                        Activation::Relu => {
                            if x[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Softplus => softplus_grad(x[k]),
                    };
                    ga[k] += g[k] * d;
                }
            }
            Op::Sum(a) => {
                let ga = self.gbuf(a).unwrap();
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumSquares(a) => {
                let x = self.values[a.0].data().to_vec();
                let ga = self.gbuf(a).unwrap();
                for (d, xi) in ga.iter_mut().zip(&x) {
                    *d += 2.0 * xi * g[0];
                }
            }
            Op::Reshape(a) => {
                add_into(self.gbuf(a).unwrap(), g);
            }
            Op::Transpose(a) => {
                let (m, n) = self.values[a.0].dims2().unwrap();
                let ga = self.gbuf(a).unwrap();
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Gather(a, indices) => {
                let rows = self.values[a.0].shape()[0];
                let w = self.values[a.0].len() / rows.max(1);
                let ga = self.gbuf(a).unwrap();
                for (k, &i) in indices.iter().enumerate() {
                    add_into(&mut ga[i * w..(i + 1) * w], &g[k * w..(k + 1) * w]);
                }
            }
            Op::ScatterAdd(a, indices) => {
                let rows = self.values[a.0].shape()[0];
                let w = self.values[a.0].len() / rows.max(1);
                let ga = self.gbuf(a).unwrap();
                for (k, &i) in indices.iter().enumerate() {
                    add_into(&mut ga[k * w..(k + 1) * w], &g[i * w..(i + 1) * w]);
                }
            }
            Op::ScaleRows(a, scales) => {
                let rows = scales.len();
                let w = self.values[a.0].len() / rows.max(1);
                let ga = self.gbuf(a).unwrap();
                for (r, s) in scales.iter().enumerate() {
                    for k in r * w..(r + 1) * w {
                        ga[k] += s * g[k];
                    }
                }
            }
            Op::RowMatVec(k, x) => {
                let (p, oc) = self.values[k.0].dims2().unwrap();
                let c = self.values[x.0].shape()[1];
                let o = oc / c;
                let kv = self.values[k.0].data().to_vec();
                let xv = self.values[x.0].data().to_vec();
                if let Some(gk) = self.gbuf(k) {
                    for r in 0..p {
                        for oi in 0..o {
                            let go = g[r * o + oi];
                            for ci in 0..c {
                                gk[r * oc + oi * c + ci] += go * xv[r * c + ci];
                            }
                        }
                    }
                }
                if let Some(gx) = self.gbuf(x) {
                    for r in 0..p {
                        for oi in 0..o {
                            let go = g[r * o + oi];
                            for ci in 0..c {
                                gx[r * c + ci] += go * kv[r * oc + oi * c + ci];
                            }
                        }
                    }
                }
            }
            Op::QuadConv {
                features,
                kernel,
                rho,
                map,
            } => self.backprop_quadconv(g, features, kernel, rho, &map),
            Op::MaxPool(a, arg) => {
                let ga = self.gbuf(a).unwrap();
                for (q, &i) in arg.iter().enumerate() {
                    ga[i] += g[q];
                }
            }
            Op::Unpool {
                input,
                channels,
                dim,
                coarse_side,
                window,
            } => {
                let back = pool::unpool_adjoint(g, channels, dim, coarse_side, window)
                    .expect("unpool shapes were checked on the forward pass");
                add_into(self.gbuf(input).unwrap(), &back);
            }
            Op::Sparse(a, m) => {
                let c = self.values[a.0].shape()[0];
                let n = m.cols;
                let ga = self.gbuf(a).unwrap();
                for ch in 0..c {
                    m.apply_transpose_acc(&g[ch * m.rows..(ch + 1) * m.rows], &mut ga[ch * n..(ch + 1) * n]);
                }
            }
        }
    }

    fn backprop_quadconv(&mut self, g: &[f64], features: Var, kernel: Var, rho: Var, map: &IndexMap) {
        let (c, n) = self.values[features.0].dims2().unwrap();
        let oc = self.values[kernel.0].shape()[1];
        let co = oc / c;
        let n_out = map.n_out();
        let f = self.values[features.0].data();
        let k = self.values[kernel.0].data();
        let r = self.values[rho.0].data();
        let idx = map.indices();

        // Per output point, the upstream gradient column.
        let gcol = |j: usize, o: usize| g[o * n_out + j];

        if self.requires[kernel.0] {
            // Rows of dK are disjoint per pair, so this parallelises cleanly.
            let mut dk = vec![0.0; map.nnz() * oc];
            let pairs: Vec<(usize, usize)> = (0..n_out)
                .flat_map(|j| map.row_range(j).map(move |p| (j, p)))
                .collect();
            dk.par_chunks_mut(oc).zip(pairs.par_iter()).for_each(|(row, &(j, pi))| {
                let i = idx[pi] as usize;
                for o in 0..co {
                    let s = r[i] * gcol(j, o);
                    for ch in 0..c {
                        row[o * c + ch] = s * f[ch * n + i];
                    }
                }
            });
            let gk = self.grads[kernel.0].get_or_insert_with(|| vec![0.0; dk.len()]);
            add_into(gk, &dk);
        }
        let need_f = self.requires[features.0];
        let need_r = self.requires[rho.0];
        if need_f || need_r {
            let mut df = vec![0.0; c * n];
            let mut dr = vec![0.0; n];
            for j in 0..n_out {
                for pi in map.row_range(j) {
                    let i = idx[pi] as usize;
                    let kp = &k[pi * oc..(pi + 1) * oc];
                    for o in 0..co {
                        let go = gcol(j, o);
                        if go == 0.0 {
                            continue;
                        }
                        let ko = &kp[o * c..(o + 1) * c];
                        for ch in 0..c {
                            df[ch * n + i] += r[i] * ko[ch] * go;
                            dr[i] += go * ko[ch] * f[ch * n + i];
                        }
                    }
                }
            }
            if need_f {
                add_into(self.gbuf(features).unwrap(), &df);
            }
            if need_r {
                add_into(self.gbuf(rho).unwrap(), &dr);
            }
        }
    }
}
