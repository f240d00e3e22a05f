use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::encoding::FourierEncoding;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Sinusoidal MLP on top of a fixed Fourier encoding.
///
/// Layer `k` maps `widths[k]` to `widths[k + 1]` with weights stored
/// row-major (`out x in`) followed by the bias, all layers packed back to
/// back in one parameter vector. Every layer but the last applies
/// `sin(ω₀ (W h + b))`; the last is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct SirenModel {
    encoding: FourierEncoding,
    widths: Vec<usize>,
    omega0: f64,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: usize,
    pub bias: usize,
}

fn layer_slots(widths: &[usize]) -> Vec<LayerSlots> {
    let mut off = 0;
    widths
        .windows(2)
        .map(|w| {
            let s = LayerSlots {
                fan_in: w[0],
                fan_out: w[1],
                weight: off,
                bias: off + w[0] * w[1],
            };
            off += w[0] * w[1] + w[1];
            s
        })
        .collect()
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    /// Input to each layer; `inputs[0]` is the encoded batch.
    inputs: Vec<Vec<f64>>,
    /// `cos(ω₀ z)` for each sinusoidal layer.
    cos: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl SirenModel {
    /// Uniform init: first layer in `±1/fan_in`, later layers in
    /// `±sqrt(6/fan_in)/ω₀`, zero biases.
    pub fn init(encoding: FourierEncoding, hidden: &[usize], omega0: f64, seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "need at least one non-empty hidden layer".into(),
            ));
        }
        if !(omega0 > 0.0) {
            return Err(Error::InvalidParameter(format!("omega0 must be > 0, got {omega0}")));
        }
        let mut widths = vec![encoding.output_dim()];
        widths.extend_from_slice(hidden);
        widths.push(1);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = vec![0.0; param_count(&widths)];
        for (k, s) in layer_slots(&widths).iter().enumerate() {
            let bound = if k == 0 {
                1.0 / s.fan_in as f64
            } else {
                (6.0 / s.fan_in as f64).sqrt() / omega0
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut params[s.weight..s.bias] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(SirenModel {
            encoding,
            widths,
            omega0,
            params,
        })
    }

    pub fn from_parts(
        encoding: FourierEncoding,
        widths: Vec<usize>,
        omega0: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        if widths.len() < 2 || widths[0] != encoding.output_dim() || *widths.last().unwrap() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "widths {widths:?} incompatible with encoding of dim {}",
                encoding.output_dim()
            )));
        }
        if params.len() != param_count(&widths) {
            return Err(Error::LengthMismatch {
                expected: param_count(&widths),
                found: params.len(),
            });
        }
        Ok(SirenModel {
            encoding,
            widths,
            omega0,
            params,
        })
    }

    pub fn encoding(&self) -> &FourierEncoding {
        &self.encoding
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layers(&self) -> Vec<LayerSlots> {
        layer_slots(&self.widths)
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn check_rows(&self, enc: &[f64], rows: usize) -> Result<()> {
        if enc.len() != rows * self.widths[0] {
            return Err(Error::DimensionMismatch(format!(
                "encoded batch holds {} values, expected {rows} x {}",
                enc.len(),
                self.widths[0]
            )));
        }
        Ok(())
    }

    fn affine(&self, s: &LayerSlots, h: &[f64], rows: usize) -> Vec<f64> {
        let bias = &self.params[s.bias..s.bias + s.fan_out];
        let mut z = Vec::with_capacity(rows * s.fan_out);
        for _ in 0..rows {
            z.extend_from_slice(bias);
        }
        let w = &self.params[s.weight..s.bias];
        linalg::matmul_nt(h, w, &mut z, rows, s.fan_in, s.fan_out, true);
        z
    }

    /// Forward pass over an encoded batch; one prediction per row.
    pub fn forward(&self, enc: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_rows(enc, rows)?;
        let slots = self.layers();
        let last = slots.len() - 1;
        let mut h = enc.to_vec();
        for (k, s) in slots.iter().enumerate() {
            let mut z = self.affine(s, &h, rows);
            if k < last {
                for v in &mut z {
                    *v = (self.omega0 * *v).sin();
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: k });
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, enc: Vec<f64>, rows: usize) -> Result<ForwardCache> {
        self.check_rows(&enc, rows)?;
        let slots = self.layers();
        let last = slots.len() - 1;
        let mut inputs = Vec::with_capacity(slots.len());
        let mut cos = Vec::with_capacity(last);
        inputs.push(enc);
        let mut output = Vec::new();
        for (k, s) in slots.iter().enumerate() {
            let mut z = self.affine(s, inputs.last().unwrap(), rows);
            if k < last {
                let mut c = vec![0.0; z.len()];
                for (v, cv) in z.iter_mut().zip(c.iter_mut()) {
                    let (sn, cs) = (self.omega0 * *v).sin_cos();
                    *v = sn;
                    *cv = cs;
                }
                cos.push(c);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: k });
            }
            if k < last {
                inputs.push(z);
            } else {
                output = z;
            }
        }
        Ok(ForwardCache {
            rows,
            inputs,
            cos,
            output,
        })
    }

    /// Gradient of a scalar loss with respect to all parameters, given its
    /// gradient with respect to the outputs.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Vec<f64>> {
        let rows = cache.rows;
        if d_out.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "output gradient of length {} for {rows} rows",
                d_out.len()
            )));
        }
        let slots = self.layers();
        let last = slots.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut g = d_out.to_vec();
        for k in (0..slots.len()).rev() {
            let s = &slots[k];
            if k < last {
                // through sin(ω₀ z): dz = ω₀ cos(ω₀ z) ⊙ dh
                for (gv, &c) in g.iter_mut().zip(&cache.cos[k]) {
                    *gv *= self.omega0 * c;
                }
            }
            let h = &cache.inputs[k];
            linalg::matmul_tn(&g, h, &mut grads[s.weight..s.bias], rows, s.fan_out, s.fan_in);
            let db = &mut grads[s.bias..s.bias + s.fan_out];
            for row in g.chunks_exact(s.fan_out) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; rows * s.fan_in];
                let w = &self.params[s.weight..s.bias];
                linalg::matmul_nn(&g, w, &mut prev, rows, s.fan_out, s.fan_in);
                g = prev;
            }
        }
        Ok(grads)
    }

    /// Encodes raw feature rows and runs the network in chunks.
    pub fn predict(&self, features: &[f64], rows: usize) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let n = self.encoding.n_inputs();
        if features.len() != rows * n {
            return Err(Error::DimensionMismatch(format!(
                "features hold {} values, expected {rows} x {n}",
                features.len()
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for chunk in features.chunks(CHUNK * n) {
            let m = chunk.len() / n;
            let enc = self.encoding.encode_batch(chunk, m)?;
            out.extend(self.forward(&enc, m)?);
        }
        Ok(out)
    }
}
