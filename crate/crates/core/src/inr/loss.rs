use serde::{Deserialize, Serialize};

use super::siren::SirenModel;
use crate::error::{Error, Result};
use crate::numeric;
use crate::projection::{project_rows, GramFactorization};

/// `total = mse_e + λ · mse_par`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_e: f64,
    pub mse_par: f64,
    pub total: f64,
}

/// Loss on predictions and its gradient with respect to them.
///
/// `e = ŷ - y`, `r_par = P e`, and `∂L/∂ŷ = (2/M)(e + λ P r_par)`. `P` is a
/// function of the feature rows only, so it is held constant.
pub fn residual_loss(
    pred: &[f64],
    y: &[f64],
    features: &[f64],
    fact: &GramFactorization,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let m = pred.len();
    if y.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{m} predictions against {} targets",
            y.len()
        )));
    }
    if m == 0 {
        return Err(Error::EmptySelection("empty batch".into()));
    }
    let e: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
    let mse_e = numeric::mean_square(&e);
    let mut grad: Vec<f64> = e.iter().map(|v| 2.0 * v / m as f64).collect();
    let r_par = project_rows(features, m, fact, &e)?;
    if lambda != 0.0 {
        let pr = project_rows(features, m, fact, &r_par)?;
        for (g, p) in grad.iter_mut().zip(&pr) {
            *g += 2.0 * lambda * p / m as f64;
        }
    }
    let mse_par = numeric::mean_square(&r_par);
    let loss = LossBreakdown {
        mse_e,
        mse_par,
        total: mse_e + lambda * mse_par,
    };
    Ok((loss, grad))
}

/// Forward, loss and backward on one batch of raw feature rows.
pub fn loss_and_grad(
    model: &SirenModel,
    features: &[f64],
    y: &[f64],
    fact: &GramFactorization,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let m = y.len();
    let n = model.encoding().n_inputs();
    if features.len() != m * n {
        return Err(Error::DimensionMismatch(format!(
            "features hold {} values, expected {m} x {n}",
            features.len()
        )));
    }
    let enc = model.encoding().encode_batch(features, m)?;
    let cache = model.forward_cached(enc, m)?;
    let (loss, d_out) = residual_loss(&cache.output, y, features, fact, lambda)?;
    let grads = model.backward(&cache, &d_out)?;
    Ok((loss, grads))
}
