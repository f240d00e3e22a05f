use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Fixed Gaussian Fourier mapping `x ↦ [sin(2πBx), cos(2πBx)]`.
///
/// `B` is `F x N` with entries drawn from `Normal(0, σ_B²)` once, at
/// construction, and never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierEncoding {
    n_inputs: usize,
    n_frequencies: usize,
    sigma: f64,
    b: Vec<f64>,
}

impl FourierEncoding {
    pub fn new(n_inputs: usize, n_frequencies: usize, sigma: f64, seed: u64) -> Result<Self> {
        if n_inputs == 0 || n_frequencies == 0 {
            return Err(Error::InvalidParameter(
                "encoding needs at least one input and one frequency".into(),
            ));
        }
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidParameter(format!("bandwidth {sigma}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (0..n_frequencies * n_inputs)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(FourierEncoding {
            n_inputs,
            n_frequencies,
            sigma,
            b,
        })
    }

    pub fn from_matrix(n_inputs: usize, n_frequencies: usize, sigma: f64, b: Vec<f64>) -> Result<Self> {
        if b.len() != n_inputs * n_frequencies {
            return Err(Error::LengthMismatch {
                expected: n_inputs * n_frequencies,
                found: b.len(),
            });
        }
        Ok(FourierEncoding {
            n_inputs,
            n_frequencies,
            sigma,
            b,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_frequencies(&self) -> usize {
        self.n_frequencies
    }

    pub fn output_dim(&self) -> usize {
        2 * self.n_frequencies
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Row-major `F x N`.
    pub fn matrix(&self) -> &[f64] {
        &self.b
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "encoding expects {} inputs, got {}",
                self.n_inputs,
                x.len()
            )));
        }
        self.encode_batch(x, 1)
    }

    /// Encodes `m` row-major input rows into `m x 2F`.
    pub fn encode_batch(&self, x: &[f64], m: usize) -> Result<Vec<f64>> {
        let (n, f) = (self.n_inputs, self.n_frequencies);
        if x.len() != m * n {
            return Err(Error::DimensionMismatch(format!(
                "batch holds {} values, expected {m} x {n}",
                x.len()
            )));
        }
        let mut proj = vec![0.0; m * f];
        linalg::matmul_nt(x, &self.b, &mut proj, m, n, f, false);
        let mut out = vec![0.0; m * 2 * f];
        for (row, p) in out.chunks_exact_mut(2 * f).zip(proj.chunks_exact(f)) {
            let (s, c) = row.split_at_mut(f);
            for j in 0..f {
                let (sin, cos) = (std::f64::consts::TAU * p[j]).sin_cos();
                s[j] = sin;
                c[j] = cos;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_input_gives_sin_zero_cos_one() {
        let enc = FourierEncoding::new(3, 5, 1.0, 1).unwrap();
        let out = enc.encode(&[0.0; 3]).unwrap();
        assert!(out[..5].iter().all(|&v| v == 0.0));
        assert!(out[5..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sin_cos_pairs_are_unit() {
        let enc = FourierEncoding::new(7, 16, 2.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..7 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = enc.encode_batch(&x, 20).unwrap();
        for row in out.chunks(32) {
            for j in 0..16 {
                assert!((row[j].powi(2) + row[16 + j].powi(2) - 1.0).abs() < 1e-12);
                assert!(row[j].abs() <= 1.0 && row[16 + j].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn matches_scalar_loop() {
        let enc = FourierEncoding::new(4, 8, 1.5, 9).unwrap();
        let x = [0.3, -0.7, 0.11, 0.9];
        let out = enc.encode(&x).unwrap();
        for j in 0..8 {
            let mut dot = 0.0;
            for k in 0..4 {
                dot += enc.matrix()[j * 4 + k] * x[k];
            }
            let arg = 2.0 * std::f64::consts::PI * dot;
            assert!((out[j] - arg.sin()).abs() < 1e-12);
            assert!((out[8 + j] - arg.cos()).abs() < 1e-12);
        }
        assert!(enc.encode(&[1.0]).is_err());
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = FourierEncoding::new(7, 128, 1.0, 42).unwrap();
        let b = FourierEncoding::new(7, 128, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let n = a.matrix().len() as f64;
        let var = a.matrix().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.15, "variance {var}");
    }
}
