//! Synthetic two-dimensional field series: a transported-then-saturating
//! Gaussian pulse and a periodic travelling wake behind an obstacle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FieldSeries;
use crate::error::{ensure, Result};
use crate::mesh::Mesh;

/// `u(x, t) = A s(k (t - t0)) exp(-|x - c(t)|^2 / w^2)` with the centre moving
/// at constant velocity until `halt` and resting afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseParams {
    pub amplitude: f64,
    pub width: f64,
    pub speed: f64,
    pub start: [f64; 2],
    /// Direction of travel; normalised internally.
    pub direction: [f64; 2],
    pub halt: f64,
    /// Steepness `k` of the logistic ramp.
    pub steepness: f64,
    pub onset: f64,
    /// Time of the last sample; samples are equally spaced from 0.
    pub duration: f64,
    /// Relative size of the seeded perturbation of amplitude, width and speed.
    pub jitter: f64,
}

impl Default for PulseParams {
    fn default() -> Self {
        PulseParams {
            amplitude: 1.0,
            width: 0.15,
            speed: 0.6,
            start: [0.25, 0.3],
            direction: [1.0, 0.6],
            halt: 0.7,
            steepness: 60.0,
            onset: 0.15,
            duration: 1.0,
            jitter: 0.1,
        }
    }
}

/// Parameters after the seeded perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseRealization {
    pub amplitude: f64,
    pub width: f64,
    pub speed: f64,
}

impl PulseParams {
    pub fn realize(&self, seed: u64) -> PulseRealization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jit = || 1.0 + self.jitter * rng.gen_range(-1.0..1.0);
        PulseRealization {
            amplitude: self.amplitude * jit(),
            width: self.width * jit(),
            speed: self.speed * jit(),
        }
    }

    /// Centre of the pulse at time `t` for the given realisation.
    pub fn center(&self, r: &PulseRealization, t: f64) -> [f64; 2] {
        let [dx, dy] = self.direction;
        let norm = (dx * dx + dy * dy).sqrt();
        let travel = r.speed * t.clamp(0.0, self.halt);
        [
            self.start[0] + travel * dx / norm,
            self.start[1] + travel * dy / norm,
        ]
    }

    pub fn sample_times(&self, samples: usize) -> (Vec<f64>, f64) {
        let dt = self.duration / (samples - 1) as f64;
        ((0..samples).map(|k| k as f64 * dt).collect(), dt)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gen_pulse2d(mesh: &Mesh, samples: usize, params: &PulseParams, seed: u64) -> Result<FieldSeries> {
    ensure!(samples >= 2, Config, "need at least 2 samples, got {samples}");
    ensure!(mesh.dim() == 2, UnsupportedMesh, "pulse2d needs a 2-D mesh, got {}-D", mesh.dim());
    ensure!(
        params.width > 0.0 && params.duration > 0.0 && params.direction != [0.0, 0.0],
        Config,
        "pulse width, duration and direction must be non-degenerate"
    );
    let r = params.realize(seed);
    let (times, dt) = params.sample_times(samples);
    let mut values = Vec::with_capacity(samples * mesh.len());
    for &t in &times {
        let c = params.center(&r, t);
        let a = r.amplitude * logistic(params.steepness * (t - params.onset));
        let w2 = r.width * r.width;
        values.extend(mesh.iter().map(|p| {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            a * (-d2 / w2).exp()
        }));
    }
    FieldSeries::new(samples, 1, mesh.len(), dt, values)
}

/// Sum of travelling waves `sin(k_m (x - x0) - w_m t + phi_m)` with
/// `w_m = 2 pi m / period`, under a downstream envelope, plus a steady part,
/// all zeroed inside a disk.
///
/// Each wave contributes two temporal functions (`cos w_m t`, `sin w_m t`), so
/// snapshot matrices have rank at most `2 * modes + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WakeParams {
    pub modes: usize,
    pub period: f64,
    pub dt: f64,
    pub disk_center: [f64; 2],
    pub disk_radius: f64,
    /// Streamwise wavenumber of the first mode; mode `m` uses `m` times this.
    pub wavenumber: f64,
    pub amplitude: f64,
    /// Cross-stream half-width of the wake envelope.
    pub wake_width: f64,
}

impl Default for WakeParams {
    fn default() -> Self {
        WakeParams {
            modes: 3,
            period: 1.0,
            dt: 1.0 / 16.0,
            disk_center: [0.25, 0.5],
            disk_radius: 0.08,
            wavenumber: 2.0 * PI * 2.0,
            amplitude: 1.0,
            wake_width: 0.15,
        }
    }
}

impl WakeParams {
    /// Number of independent temporal functions in the field.
    pub fn temporal_rank(&self) -> usize {
        2 * self.modes + 1
    }
}

#[derive(Debug, Clone)]
struct WakeMode {
    k: f64,
    omega: f64,
    amp: f64,
    phase: f64,
}

fn wake_modes(params: &WakeParams, seed: u64) -> Vec<WakeMode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=params.modes)
        .map(|m| WakeMode {
            k: params.wavenumber * m as f64,
            omega: 2.0 * PI * m as f64 / params.period,
            amp: params.amplitude / m as f64 * rng.gen_range(0.8..1.2),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect()
}

fn wake_value(params: &WakeParams, modes: &[WakeMode], p: &[f64], t: f64) -> f64 {
    let [cx, cy] = params.disk_center;
    let dx = p[0] - cx;
    let dy = p[1] - cy;
    if dx * dx + dy * dy <= params.disk_radius * params.disk_radius {
        return 0.0;
    }
    let cross = (-(dy * dy) / (params.wake_width * params.wake_width)).exp();
    let downstream = 0.5 * (1.0 + (dx / params.disk_radius).tanh());
    let env = cross * downstream;
    // Reduce the time phase modulo one period so that t and t + period give
    // the same argument to rounding.
    let tau = t.rem_euclid(params.period);
    let waves: f64 = modes
        .iter()
        .map(|m| m.amp * (m.k * dx - m.omega * tau + m.phase).sin())
        .sum();
    0.5 * env + env * waves
}

/// Field value at an arbitrary point and time.
pub fn wake_at(params: &WakeParams, seed: u64, p: &[f64], t: f64) -> f64 {
    wake_value(params, &wake_modes(params, seed), p, t)
}

pub fn gen_wake2d(mesh: &Mesh, samples: usize, params: &WakeParams, seed: u64) -> Result<FieldSeries> {
    ensure!(samples >= 2, Config, "need at least 2 samples, got {samples}");
    ensure!(mesh.dim() == 2, UnsupportedMesh, "wake2d needs a 2-D mesh, got {}-D", mesh.dim());
    ensure!(
        params.period > 0.0 && params.dt > 0.0 && params.disk_radius > 0.0 && params.wake_width > 0.0,
        Config,
        "wake period, dt, disk radius and width must be positive"
    );
    let modes = wake_modes(params, seed);
    let mut values = Vec::with_capacity(samples * mesh.len());
    for k in 0..samples {
        let t = k as f64 * params.dt;
        values.extend(mesh.iter().map(|p| wake_value(params, &modes, p, t)));
    }
    FieldSeries::new(samples, 1, mesh.len(), params.dt, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{nonuniform_mesh, uniform_grid, Density};

    #[test]
    fn pulse_starts_near_zero() {
        let g = uniform_grid(2, 16, 1.0).unwrap();
        let p = PulseParams::default();
        let s = gen_pulse2d(&g, 8, &p, 1).unwrap();
        let a = p.realize(1).amplitude;
        let m0 = s.sample(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(m0 < 1e-3 * a, "{m0}");
    }

    #[test]
    fn pulse_peak_tracks_center() {
        let side = 32;
        let g = uniform_grid(2, side, 1.0).unwrap();
        let h = 1.0 / (side - 1) as f64;
        let p = PulseParams::default();
        let s = gen_pulse2d(&g, 12, &p, 7).unwrap();
        let r = p.realize(7);
        let (times, _) = p.sample_times(12);
        for (t, f) in times.iter().zip(s.iter()) {
            let i = f
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let c = p.center(&r, *t);
            let q = g.point(i);
            assert!((q[0] - c[0]).abs() <= h && (q[1] - c[1]).abs() <= h);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let g = uniform_grid(2, 8, 1.0).unwrap();
        let a = gen_pulse2d(&g, 4, &PulseParams::default(), 3).unwrap();
        assert_eq!(a, gen_pulse2d(&g, 4, &PulseParams::default(), 3).unwrap());
        assert_ne!(a, gen_pulse2d(&g, 4, &PulseParams::default(), 4).unwrap());
        let w = gen_wake2d(&g, 4, &WakeParams::default(), 3).unwrap();
        assert_eq!(w, gen_wake2d(&g, 4, &WakeParams::default(), 3).unwrap());
    }

    #[test]
    fn wake_is_periodic_and_masked() {
        let p = WakeParams::default();
        let m = nonuniform_mesh(300, Density::Uniform, 2).unwrap();
        for x in m.iter() {
            for t in [0.0, 0.3, 0.77] {
                let a = wake_at(&p, 5, x, t);
                let b = wake_at(&p, 5, x, t + p.period);
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
        let s = gen_wake2d(&m, 5, &p, 5).unwrap();
        for (i, x) in m.iter().enumerate() {
            let r = ((x[0] - 0.25).powi(2) + (x[1] - 0.5).powi(2)).sqrt();
            if r <= p.disk_radius {
                assert!((0..5).all(|t| s.sample(t)[i] == 0.0));
            }
        }
        assert!(wake_at(&p, 5, &[0.25, 0.5], 0.1) == 0.0);
    }

    #[test]
    fn rejects_short_series() {
        let g = uniform_grid(2, 4, 1.0).unwrap();
        assert!(gen_pulse2d(&g, 1, &PulseParams::default(), 0).is_err());
        assert!(gen_wake2d(&g, 1, &WakeParams::default(), 0).is_err());
    }
}
