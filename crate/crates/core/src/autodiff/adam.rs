use crate::error::{ensure, Error, Result};

/// Bias-corrected Adam state for a list of parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with moment buffers sized after `lens`.
    pub fn new(lr: f64, lens: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Rebuilds a state from stored moments.
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        ensure!(m.len() == v.len(), Shape, "moment lists differ in length");
        ensure!(
            m.iter().zip(&v).all(|(a, b)| a.len() == b.len()),
            Shape,
            "moment vectors differ in length"
        );
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every parameter vector in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            Shape,
            "Adam tracks {} vectors, got {} params and {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.len() == self.m[k].len() && g.len() == self.m[k].len(),
                Shape,
                "parameter vector {k}: lengths {} / {} / {}",
                p.len(),
                g.len(),
                self.m[k].len()
            );
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} in parameter vector {k} at index {pos} (step {})",
                    g[pos],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(1e-3, &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_size() {
        let mut s = AdamState::new(1e-3, &[1]);
        let mut p = vec![0.0];
        s.step(&mut [&mut p], &[&[1.0]]).unwrap();
        // m_hat = v_hat = 1 at t = 1.
        assert_relative_eq!(p[0], -1e-3 / (1.0 + 1e-8), max_relative = 1e-15);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut s = AdamState::new(1e-3, &[2]);
        let mut p = vec![0.0, 0.0];
        let err = s.step(&mut [&mut p], &[&[0.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(s.step_count(), 0);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut s = AdamState::new(1e-2, &[2]);
            let mut p = vec![0.5, -0.25];
            for k in 0..50 {
                let g = [p[0] * 2.0 + k as f64 * 1e-3, (p[1] - 1.0).sin()];
                s.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
