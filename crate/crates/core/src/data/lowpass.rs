//! One-dimensional low-pass filtering example: a two-tone signal convolved with
//! a band-limited sinc kernel, sampled uniformly or at random locations.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::index_map::OpCounter;
use crate::kernel::bump;
use crate::mesh::Mesh;
use crate::quadconv::{FilterKernel, FixedKernel, QuadConvLayer};
use crate::quadrature::QuadratureWeights;

/// `sin(pi x) + sin(14 pi x)`.
pub fn signal(x: f64) -> f64 {
    (PI * x).sin() + (14.0 * PI * x).sin()
}

/// `8 sin(8 pi x) / (pi x)`, with its limit 64 at the origin.
pub fn lowpass_kernel(x: f64) -> f64 {
    if x == 0.0 {
        64.0
    } else {
        8.0 * (8.0 * PI * x).sin() / (PI * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    Nonuniform { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct LowpassSignals {
    /// Sorted sample locations in `[-1, 1]`, both endpoints included.
    pub x: Vec<f64>,
    pub f: Vec<f64>,
}

pub fn gen_lowpass_signals(n_points: usize, sampling: Sampling) -> Result<LowpassSignals> {
    ensure!(n_points >= 8, Config, "need at least 8 samples, got {n_points}");
    let h = 2.0 / (n_points - 1) as f64;
    let x: Vec<f64> = match sampling {
        Sampling::Uniform => (0..n_points).map(|i| -1.0 + i as f64 * h).collect(),
        Sampling::Nonuniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: Vec<f64> = (0..n_points - 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            x.push(-1.0);
            x.push(1.0);
            x.sort_by(f64::total_cmp);
            x
        }
    };
    let f = x.iter().map(|&v| signal(v)).collect();
    Ok(LowpassSignals { x, f })
}

fn trapezoid_conv(y: f64, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let mut s = 0.5 * (signal(-1.0) * lowpass_kernel(y + 1.0) + signal(1.0) * lowpass_kernel(y - 1.0));
    for i in 1..n {
        let x = -1.0 + i as f64 * h;
        s += signal(x) * lowpass_kernel(y - x);
    }
    s * h
}

/// `(f * g)(y)` with `f` restricted to `[-1, 1]`, by composite trapezoid
/// quadrature refined until two successive halvings agree to `1e-6`.
pub fn analytic_lowpass_oracle(ys: &[f64]) -> Vec<f64> {
    ys.par_iter()
        .map(|&y| {
            let mut n = 4096;
            let mut prev = trapezoid_conv(y, n);
            loop {
                n *= 2;
                let next = trapezoid_conv(y, n);
                if (next - prev).abs() < 1e-7 || n >= 1 << 26 {
                    return next;
                }
                prev = next;
            }
        })
        .collect()
}

/// Composite trapezoid weights for sorted 1-D nodes.
pub fn trapezoid_weights_1d(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LowpassDemo {
    pub y: Vec<f64>,
    pub analytic: Vec<f64>,
    /// Samples treated as if they sat on the uniform grid.
    pub naive_discrete: Vec<f64>,
    /// Kernel evaluated at the true offsets, uniform weight `2 / (n - 1)`.
    pub continuous_kernel: Vec<f64>,
    /// Kernel at the true offsets with trapezoid quadrature weights.
    pub quadconv: Vec<f64>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl LowpassDemo {
    /// Max abs error against the oracle of the naive, continuous-kernel and
    /// quadrature methods, in that order.
    pub fn max_errors(&self) -> [f64; 3] {
        [
            max_abs_diff(&self.naive_discrete, &self.analytic),
            max_abs_diff(&self.continuous_kernel, &self.analytic),
            max_abs_diff(&self.quadconv, &self.analytic),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,analytic,naive_discrete,continuous_kernel,quadconv\n");
        for i in 0..self.y.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.y[i], self.analytic[i], self.naive_discrete[i], self.continuous_kernel[i], self.quadconv[i]
            ));
        }
        s
    }
}

/// Runs the three discrete approximations at `n_out` uniformly spaced output
/// points in `[-window, window]` and the refined oracle.
pub fn lowpass_demo(n_points: usize, sampling: Sampling, n_out: usize, window: f64) -> Result<LowpassDemo> {
    ensure!(n_out >= 2, Config, "need at least 2 output points");
    ensure!(
        window > 0.0 && window <= 1.0,
        Config,
        "comparison window must lie in (0, 1], got {window}"
    );
    let sig = gen_lowpass_signals(n_points, sampling)?;
    let step = 2.0 * window / (n_out - 1) as f64;
    let y: Vec<f64> = (0..n_out).map(|j| -window + j as f64 * step).collect();
    let h = 2.0 / (n_points - 1) as f64;
    let naive = y
        .iter()
        .map(|&yj| {
            sig.f
                .iter()
                .enumerate()
                .map(|(i, fi)| h * fi * lowpass_kernel(yj - (-1.0 + i as f64 * h)))
                .sum()
        })
        .collect();
    let continuous = y
        .iter()
        .map(|&yj| sig.x.iter().zip(&sig.f).map(|(xi, fi)| h * fi * lowpass_kernel(yj - xi)).sum())
        .collect();

    // The quadrature method runs through the operator itself, with a support
    // radius wide enough to cover every offset and the window divided out.
    let alpha = 2.5;
    let input = Arc::new(Mesh::from_points(1, sig.x.clone())?);
    let output = Arc::new(Mesh::from_points(1, y.clone())?);
    let kernel = FilterKernel::Fixed(FixedKernel {
        rows: 1,
        cols: 1,
        f: Arc::new(move |z: &[f64]| vec![lowpass_kernel(z[0]) / bump(z, alpha)]),
    });
    let weights = QuadratureWeights::from_static(trapezoid_weights_1d(&sig.x))?;
    let counter = OpCounter::new();
    let layer = QuadConvLayer::build(input, output, 1, 1, alpha, kernel, weights, &counter)?;
    let out = layer.forward(&Tensor::new(&[1, n_points], sig.f)?, &counter)?;

    Ok(LowpassDemo {
        analytic: analytic_lowpass_oracle(&y),
        y,
        naive_discrete: naive,
        continuous_kernel: continuous,
        quadconv: out.into_data(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(signal(0.0), 0.0);
        assert!((signal(0.5) - 1.0).abs() < 1e-13);
        assert_eq!(lowpass_kernel(0.0), 64.0);
        assert!((lowpass_kernel(1e-9) - 64.0).abs() < 1e-6);
    }

    #[test]
    fn sample_counts() {
        let s = gen_lowpass_signals(16, Sampling::Uniform).unwrap();
        assert_eq!(s.x.len(), 16);
        assert_eq!(s.x[0], -1.0);
        assert!((s.x[15] - 1.0).abs() < 1e-15);
        let r = gen_lowpass_signals(16, Sampling::Nonuniform { seed: 4 }).unwrap();
        assert!(r.x.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((r.x[0], r.x[15]), (-1.0, 1.0));
        assert!(gen_lowpass_signals(7, Sampling::Uniform).is_err());
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        let w = trapezoid_weights_1d(&[-1.0, -0.2, 0.1, 1.0]);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-15);
        assert_eq!(w[0], 0.4);
    }

    #[test]
    fn oracle_is_odd_and_converged() {
        let v = analytic_lowpass_oracle(&[0.0, 0.3, -0.3]);
        assert!(v[0].abs() < 1e-6);
        assert!((v[1] + v[2]).abs() < 1e-6);
        let fine = trapezoid_conv(0.3, 1 << 22);
        assert!((fine - v[1]).abs() < 1e-6);
    }

    #[test]
    fn csv_rows_match_request() {
        let d = lowpass_demo(32, Sampling::Uniform, 7, 0.5).unwrap();
        let csv = d.to_csv();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with("y,analytic,naive_discrete,continuous_kernel,quadconv"));
    }
}
