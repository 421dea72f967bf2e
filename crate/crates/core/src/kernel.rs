//! The compactly supported filter `G(z) = bump(z) * H(z; theta)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::index_map::OpCounter;

/// Smooth bump supported on the open ball of radius `alpha`:
/// `exp(1 - 1 / (1 - (|z|/alpha)^4))` inside, 0 outside.
pub fn bump(z: &[f64], alpha: f64) -> f64 {
    bump_at_norm(z.iter().map(|v| v * v).sum::<f64>().sqrt(), alpha)
}

pub fn bump_at_norm(norm: f64, alpha: f64) -> f64 {
    if !(norm < alpha) {
        return 0.0;
    }
    let r = norm / alpha;
    if r >= 1.0 {
        return 0.0;
    }
    let r4 = (r * r) * (r * r);
    (1.0 - 1.0 / (1.0 - r4)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpParams {
    alpha: f64,
}

impl BumpParams {
    pub fn new(alpha: f64) -> Result<Self> {
        ensure!(
            alpha > 0.0 && alpha.is_finite(),
            Config,
            "bump radius must be positive, got {alpha}"
        );
        Ok(BumpParams { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        bump(z, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => crate::quadrature::softplus(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the `fan_out x fan_in` row-major weight matrix.
    pub weight: usize,
    /// Offset of the `fan_out` bias vector.
    pub bias: usize,
}

/// MLP mapping an offset in `R^D` to a `rows x cols` filter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMlp {
    input_dim: usize,
    hidden: Vec<usize>,
    activation: Activation,
    out_rows: usize,
    out_cols: usize,
    theta: Vec<f64>,
}

impl KernelMlp {
    /// Zero-initialised network.
    pub fn zeros(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        out_rows: usize,
        out_cols: usize,
    ) -> Result<Self> {
        ensure!(input_dim >= 1, Config, "kernel input dimension must be >= 1");
        ensure!(
            out_rows >= 1 && out_cols >= 1,
            Config,
            "kernel output must have at least one row and column"
        );
        ensure!(
            hidden.iter().all(|&w| w >= 1),
            Config,
            "hidden widths must be positive"
        );
        let mut net = KernelMlp {
            input_dim,
            hidden: hidden.to_vec(),
            activation,
            out_rows,
            out_cols,
            theta: Vec::new(),
        };
        net.theta = vec![0.0; net.param_count()];
        Ok(net)
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        out_rows: usize,
        out_cols: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden, activation, out_rows, out_cols)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in net.slots() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            let end = slot.bias + slot.fan_out;
            for v in &mut net.theta[slot.weight..end] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn out_cols(&self) -> usize {
        self.out_cols
    }

    pub fn out_len(&self) -> usize {
        self.out_rows * self.out_cols
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        ensure!(
            theta.len() == self.theta.len(),
            Shape,
            "kernel expects {} parameters, got {}",
            self.theta.len(),
            theta.len()
        );
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    /// Widths of every layer, input first and output last.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.out_len());
        w
    }

    pub fn slots(&self) -> Vec<AffineSlot> {
        let mut offset = 0;
        self.widths()
            .windows(2)
            .map(|w| {
                let slot = AffineSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight: offset,
                    bias: offset + w[0] * w[1],
                };
                offset = slot.bias + w[1];
                slot
            })
            .collect()
    }

    /// Analytic parameter count, `sum (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// `H(z)` as a row-major `rows x cols` matrix.
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            z.len() == self.input_dim,
            Shape,
            "kernel input has length {}, expected {}",
            z.len(),
            self.input_dim
        );
        let slots = self.slots();
        let last = slots.len() - 1;
        let mut x = z.to_vec();
        for (l, s) in slots.iter().enumerate() {
            let mut y = self.theta[s.bias..s.bias + s.fan_out].to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &self.theta[s.weight + o * s.fan_in..s.weight + (o + 1) * s.fan_in];
                *yo += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            }
            if l != last {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            x = y;
        }
        Ok(x)
    }

    /// `G(z) = bump(z) H(z)`; the MLP is skipped entirely outside the support.
    pub fn filter_eval(&self, bump: &BumpParams, z: &[f64], counter: &OpCounter) -> Result<Vec<f64>> {
        ensure!(
            z.len() == self.input_dim,
            Shape,
            "kernel input has length {}, expected {}",
            z.len(),
            self.input_dim
        );
        let b = bump.eval(z);
        if b == 0.0 {
            return Ok(vec![0.0; self.out_len()]);
        }
        counter.add_kernel_evals(1);
        let mut h = self.eval(z)?;
        h.iter_mut().for_each(|v| *v *= b);
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn bump_values() {
        assert_eq!(bump(&[0.0, 0.0], 2.0), 1.0);
        assert_eq!(bump(&[2.0, 0.0], 2.0), 0.0);
        assert_eq!(bump(&[3.0], 2.0), 0.0);
        assert_relative_eq!(bump(&[1.0, 0.0], 2.0), (-1.0f64 / 15.0).exp(), epsilon = 1e-15);
        assert_relative_eq!(bump(&[0.5], 1.0), 0.935507, epsilon = 1e-6);
    }

    #[test]
    fn bump_near_boundary_is_finite() {
        for k in 1..60 {
            let r = 1.0 - 2f64.powi(-k);
            let v = bump(&[r], 1.0);
            assert!(v.is_finite() && (0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn bump_gradient_vanishes_at_edge() {
        let alpha = 1.0;
        let d = |r: f64| {
            let h = 1e-7;
            (bump(&[r + h], alpha) - bump(&[r - h], alpha)) / (2.0 * h)
        };
        assert!(d(0.999).abs() < d(0.9).abs());
        assert!(bump(&[0.999], alpha) < 1e-100);
    }

    #[test]
    fn param_count_and_shapes() {
        let net = KernelMlp::zeros(2, &[32, 32], Activation::Tanh, 3, 4).unwrap();
        assert_eq!(net.param_count(), 3 * 32 + 33 * 32 + 33 * 12);
        assert_eq!(net.theta().len(), net.param_count());
        let slots = net.slots();
        assert_eq!(slots.last().unwrap().bias + 12, net.param_count());
    }

    #[test]
    fn single_affine() {
        let mut net = KernelMlp::zeros(2, &[], Activation::Tanh, 2, 1).unwrap();
        // W = [[1, 2], [3, 4]], b = [0.5, -1]
        net.set_theta(&[1.0, 2.0, 3.0, 4.0, 0.5, -1.0]).unwrap();
        assert_eq!(net.eval(&[1.0, -1.0]).unwrap(), vec![-0.5, -2.0]);
    }

    #[test]
    fn zero_net_gives_zero() {
        let net = KernelMlp::zeros(3, &[8, 8], Activation::Tanh, 2, 2).unwrap();
        assert_eq!(net.eval(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn shape_mismatch() {
        let net = KernelMlp::zeros(2, &[4], Activation::Tanh, 1, 1).unwrap();
        assert!(matches!(net.eval(&[1.0]), Err(Error::Shape(_))));
    }

    fn hand_forward(net: &KernelMlp, z: &[f64]) -> Vec<f64> {
        // Written out layer by layer, independent of the slot bookkeeping.
        let t = net.theta();
        let mut widths = vec![net.input_dim()];
        widths.extend_from_slice(net.hidden());
        widths.push(net.out_len());
        let mut off = 0;
        let mut x = z.to_vec();
        for l in 0..widths.len() - 1 {
            let (a, b) = (widths[l], widths[l + 1]);
            let w = &t[off..off + a * b];
            let bias = &t[off + a * b..off + a * b + b];
            off += a * b + b;
            let mut y = vec![0.0; b];
            for o in 0..b {
                let mut acc = bias[o];
                for i in 0..a {
                    acc += w[o * a + i] * x[i];
                }
                y[o] = if l + 2 < widths.len() { acc.tanh() } else { acc };
            }
            x = y;
        }
        x
    }

    #[test]
    fn random_net_matches_hand_forward() {
        let net = KernelMlp::init(2, &[7, 5], Activation::Tanh, 3, 2, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let z = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = net.eval(&z).unwrap();
            let b = hand_forward(&net, &z);
            for (x, y) in a.iter().zip(&b) {
                assert_relative_eq!(*x, *y, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn filter_short_circuits_outside_support() {
        let net = KernelMlp::init(2, &[4], Activation::Tanh, 2, 2, 0).unwrap();
        let bp = BumpParams::new(0.5).unwrap();
        let c = OpCounter::new();
        assert_eq!(net.filter_eval(&bp, &[0.5, 0.0], &c).unwrap(), vec![0.0; 4]);
        assert_eq!(net.filter_eval(&bp, &[0.4, 0.4], &c).unwrap(), vec![0.0; 4]);
        assert_eq!(c.kernel_evals(), 0);
        assert_eq!(
            net.filter_eval(&bp, &[0.0, 0.0], &c).unwrap(),
            net.eval(&[0.0, 0.0]).unwrap()
        );
        assert_eq!(c.kernel_evals(), 1);
        let z = [0.1, -0.2];
        let g = net.filter_eval(&bp, &z, &c).unwrap();
        let h = hand_forward(&net, &z);
        let b = bump(&z, 0.5);
        for (x, y) in g.iter().zip(&h) {
            assert_relative_eq!(*x, b * y, max_relative = 1e-14);
        }
    }

    #[test]
    fn theta_gradient_matches_fd() {
        // d/dtheta of a fixed linear functional of G, checked with central differences.
        let net = KernelMlp::init(2, &[5, 4], Activation::Tanh, 2, 3, 9).unwrap();
        let bp = BumpParams::new(1.0).unwrap();
        let z = [0.3, -0.4];
        let proj: Vec<f64> = (0..6).map(|k| (k as f64 * 0.7).sin()).collect();
        let f = |n: &KernelMlp| -> f64 {
            n.filter_eval(&bp, &z, &OpCounter::new())
                .unwrap()
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grad = crate::quadconv::filter_theta_grad(&net, &bp, &z, &proj).unwrap();
        let h = 1e-6;
        for k in 0..net.param_count() {
            let mut p = net.clone();
            p.theta_mut()[k] += h;
            let mut m = net.clone();
            m.theta_mut()[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(err <= 1e-5, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    proptest! {
        #[test]
        fn filter_vanishes_outside_ball(x in -3.0f64..3.0, y in -3.0f64..3.0, alpha in 0.1f64..2.0) {
            let net = KernelMlp::init(2, &[3], Activation::Tanh, 1, 2, 5).unwrap();
            let bp = BumpParams::new(alpha).unwrap();
            let g = net.filter_eval(&bp, &[x, y], &OpCounter::new()).unwrap();
            if (x * x + y * y).sqrt() >= alpha {
                prop_assert!(g.iter().all(|v| *v == 0.0));
            }
            let b = bump(&[x, y], alpha);
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
