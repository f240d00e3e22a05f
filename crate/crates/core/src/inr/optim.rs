use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with the AMSGrad running maximum of the second moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_max: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            v_max: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update: `p -= lr / (1 - β₁ᵗ) · m / (sqrt(v_max / (1 - β₂ᵗ)) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.v[i] > self.v_max[i] {
                self.v_max[i] = self.v[i];
            }
            let denom = self.v_max[i].sqrt() / bc2_sqrt + eps;
            params[i] -= step_size * self.m[i] / denom;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_scalar() {
        let mut s = AdamState::new(1);
        let mut p = [0.0];
        s.step(&mut p, &[1.0], 1e-5).unwrap();
        // m = 0.1, v = 0.001; corrected m = 1, corrected sqrt(v) = 1
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat_sqrt = 0.001f64.sqrt() / (1.0 - 0.999f64).sqrt();
        let expect = -1e-5 * m_hat / (v_hat_sqrt + 1e-8);
        assert!((p[0] - expect).abs() < 1e-20, "{} vs {expect}", p[0]);
        assert!((p[0] + 1e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..50 {
            s.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn v_max_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = AdamState::new(8);
        let mut p = vec![0.0; 8];
        let mut prev = s.v_max.clone();
        for _ in 0..100 {
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            s.step(&mut p, &g, 1e-3).unwrap();
            assert!(s.v_max.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = s.v_max.clone();
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut s = AdamState::new(1);
        assert!(s.step(&mut [0.0], &[f64::NAN], 1e-3).is_err());
    }
}
