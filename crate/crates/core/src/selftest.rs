//! Invariant suite behind `orthosep check`: projector identities against a
//! dense oracle, finite-difference gradients, Tofts closed forms and the
//! rank-sum test against brute-force enumeration.
//!
//! Every check reports its measured value next to the tolerance it was
//! held to, so callers can pin tolerances independently of the defaults.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::eval::{rank_sum_exact, rank_sum_normal};
use crate::inr::{loss_and_grad, residual_loss, FourierEncoding, SirenModel};
use crate::kinetics::{fit_tofts, population_aif, tofts_forward, Aif, TimeGrid, ToftsParams};
use crate::numeric;
use crate::projection::{
    decompose_residual, factorize_rows, gram_factorize, project_rows, xt_times, ProjectorSpec,
    DEFAULT_RIDGE_EPSILON,
};
use crate::volumes::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst value seen; the check passes when it is at most `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<40} {:.3e} (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

fn random_features(m: usize, n: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let values = (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect();
    FeatureMatrix::from_rows(m, n, values).expect("finite values")
}

fn random_vec(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorTolerances {
    pub identity: f64,
    pub dense: f64,
}

/// Identities over `instances` random `m x n` matrices, plus agreement with
/// a dense projector on `dense_m x n` matrices.
///
/// Residuals are relative to the size of what cancels: `‖Pv‖` for
/// idempotence, `‖a‖‖b‖` for symmetry, `‖Xᵀe‖` for `Xᵀr_⊥`, `‖e‖²` for
/// Pythagoras and `‖e‖` for the dense comparison.
pub fn projector_checks(
    instances: usize,
    m: usize,
    n: usize,
    dense_m: usize,
    tol: ProjectorTolerances,
    seed: u64,
) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let x = random_features(m, n, &mut rng);
        let pinv = gram_factorize(&x, ProjectorSpec::pinv())?;
        let e = random_vec(m, &mut rng);
        let b = random_vec(m, &mut rng);

        let pe = project_rows(x.values(), m, &pinv, &e)?;
        let ppe = project_rows(x.values(), m, &pinv, &pe)?;
        worst[0] = worst[0].max(diff_norm(&ppe, &pe) / numeric::norm(&pe));

        let pb = project_rows(x.values(), m, &pinv, &b)?;
        let sym = (numeric::dot(&pe, &b) - numeric::dot(&e, &pb)).abs();
        worst[1] = worst[1].max(sym / (numeric::norm(&e) * numeric::norm(&b)));

        let d = decompose_residual(&x, &pinv, &e)?;
        let xtr = xt_times(x.values(), m, n, &d.r_perp);
        let xte = xt_times(x.values(), m, n, &e);
        worst[2] = worst[2].max(numeric::norm(&xtr) / numeric::norm(&xte));

        let ee = numeric::dot(&e, &e);
        let pyth = (ee - numeric::dot(&d.r_par, &d.r_par) - numeric::dot(&d.r_perp, &d.r_perp)).abs();
        worst[3] = worst[3].max(pyth / ee);

        let ridge = gram_factorize(&x, ProjectorSpec::default())?;
        let dr = decompose_residual(&x, &ridge, &e)?;
        let lhs = xt_times(x.values(), m, n, &dr.r_perp);
        let xm = DMatrix::from_row_slice(m, n, x.values());
        let gram = xm.transpose() * &xm + DMatrix::identity(n, n) * DEFAULT_RIDGE_EPSILON;
        let rhs = gram
            .cholesky()
            .expect("ridge Gram is positive definite")
            .solve(&DVector::from_column_slice(&xte))
            * DEFAULT_RIDGE_EPSILON;
        worst[4] = worst[4].max(diff_norm(&lhs, rhs.as_slice()) / numeric::norm(&xte));
    }
    let mut out = vec![
        CheckOutcome::new("pinv idempotence", worst[0], tol.identity),
        CheckOutcome::new("pinv symmetry", worst[1], tol.identity),
        CheckOutcome::new("pinv X^T r_perp = 0", worst[2], tol.identity),
        CheckOutcome::new("pinv Pythagorean identity", worst[3], tol.identity),
        CheckOutcome::new("ridge X^T r_perp identity", worst[4], tol.identity),
    ];

    let mut dense_worst = 0.0f64;
    for spec in [ProjectorSpec::pinv(), ProjectorSpec::default()] {
        for _ in 0..10 {
            let x = random_features(dense_m, n, &mut rng);
            let e = random_vec(dense_m, &mut rng);
            let fact = factorize_rows(x.values(), dense_m, n, spec)?;
            let fast = project_rows(x.values(), dense_m, &fact, &e)?;
            let p = dense_projector(&x, spec);
            let slow = &p * DVector::from_column_slice(&e);
            dense_worst = dense_worst.max(diff_norm(&fast, slow.as_slice()) / numeric::norm(&e));
        }
    }
    out.push(CheckOutcome::new("skinny vs dense projector", dense_worst, tol.dense));
    Ok(out)
}

/// `X (XᵀX + εI)⁻¹ Xᵀ` or `X X⁺` as an explicit `M x M` matrix.
pub fn dense_projector(x: &FeatureMatrix, spec: ProjectorSpec) -> DMatrix<f64> {
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.values());
    match spec {
        ProjectorSpec::Ridge { epsilon } => {
            let gram = xm.transpose() * &xm + DMatrix::identity(x.cols(), x.cols()) * epsilon;
            let inv = gram.try_inverse().expect("ridge Gram is invertible");
            &xm * inv * xm.transpose()
        }
        ProjectorSpec::Pinv { rcond } => {
            let pinv = xm.clone().pseudo_inverse(rcond).expect("SVD converges");
            xm * pinv
        }
    }
}

/// Analytic against central-difference gradients of the full loss
/// (λ = 1, ridge projector over the batch) on a small model. One outcome
/// per weight matrix and bias vector, each the relative error
/// `‖g - g_fd‖ / ‖g_fd‖`.
pub fn gradient_checks(rows: usize, h: f64, tol: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let x = random_features(rows, n, &mut rng);
    let y: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
    let enc = FourierEncoding::new(n, 6, 1.0, seed)?;
    let mut model = SirenModel::init(enc, &[10, 8], 30.0, seed)?;
    // nudge biases off zero so their gradients are exercised away from init
    let normal = Normal::new(0.0, 0.05).expect("valid sd");
    for s in model.layers() {
        for b in &mut model.params_mut()[s.bias..s.bias + s.fan_out] {
            *b = normal.sample(&mut rng);
        }
    }
    let lambda = 1.0;
    let fact = factorize_rows(x.values(), rows, n, ProjectorSpec::default())?;
    let (_, grads) = loss_and_grad(&model, x.values(), &y, &fact, lambda)?;
    let encoded = model.encoding().encode_batch(x.values(), rows)?;
    let loss_at = |m: &SirenModel| -> Result<f64> {
        let pred = m.forward(&encoded, rows)?;
        Ok(residual_loss(&pred, &y, x.values(), &fact, lambda)?.0.total)
    };

    let mut out = Vec::new();
    for (k, s) in model.layers().iter().enumerate() {
        for (kind, lo, hi) in [
            ("weight", s.weight, s.bias),
            ("bias", s.bias, s.bias + s.fan_out),
        ] {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in lo..hi {
                let orig = model.params()[j];
                model.params_mut()[j] = orig + h;
                let up = loss_at(&model)?;
                model.params_mut()[j] = orig - h;
                let down = loss_at(&model)?;
                model.params_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                num += (grads[j] - fd).powi(2);
                den += fd * fd;
            }
            let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
            out.push(CheckOutcome::new(format!("gradient layer {k} {kind}"), rel, tol));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ToftsTolerances {
    pub closed_form: f64,
    pub zero_ktrans: f64,
    pub fit: f64,
}

/// Constant-AIF closed form at 1 s sampling over 240 s, the Ktrans = 0
/// limit, and noiseless fit recovery over `draws` random parameter sets.
pub fn tofts_checks(draws: usize, tol: ToftsTolerances, seed: u64) -> Result<Vec<CheckOutcome>> {
    let grid = TimeGrid::uniform(1.0, 240.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| ToftsParams {
        ktrans: rng.random_range(0.002..0.01),
        ve: rng.random_range(0.2..0.5),
        vp: rng.random_range(0.01..0.1),
    };

    let c0 = 3.0;
    let flat = Aif::new(vec![c0; grid.len()])?;
    let mut closed = 0.0f64;
    for _ in 0..20 {
        let p = draw(&mut rng);
        let c = tofts_forward(&p, &flat, &grid)?;
        for (k, &t) in grid.times().iter().enumerate().skip(1) {
            let exact = p.vp * c0 + c0 * p.ve * (1.0 - (-p.ktrans * t / p.ve).exp());
            closed = closed.max(((c[k] - exact) / exact).abs());
        }
    }

    let aif = population_aif(&grid, 10.0, 6.0, 0.5, 0.01)?;
    let mut zero = 0.0f64;
    for _ in 0..20 {
        let p = ToftsParams { ktrans: 0.0, ..draw(&mut rng) };
        let c = tofts_forward(&p, &aif, &grid)?;
        for (ci, a) in c.iter().zip(aif.samples()) {
            let exact = p.vp * a;
            if exact != 0.0 {
                zero = zero.max(((ci - exact) / exact).abs());
            } else {
                zero = zero.max(ci.abs());
            }
        }
    }

    let init = ToftsParams { ktrans: 0.005, ve: 0.3, vp: 0.05 };
    let mut fit = 0.0f64;
    for _ in 0..draws {
        let p = draw(&mut rng);
        let curve = tofts_forward(&p, &aif, &grid)?;
        let r = fit_tofts(&curve, &aif, &grid, &init)?;
        for (est, truth) in [(r.params.ktrans, p.ktrans), (r.params.ve, p.ve), (r.params.vp, p.vp)] {
            fit = fit.max(((est - truth) / truth).abs());
        }
    }
    Ok(vec![
        CheckOutcome::new("Tofts constant-AIF closed form", closed, tol.closed_form),
        CheckOutcome::new("Tofts Ktrans = 0 limit", zero, tol.zero_ktrans),
        CheckOutcome::new("Tofts noiseless fit recovery", fit, tol.fit),
    ])
}

/// Two-sided p-value by listing every way to pick `a.len()` of the pooled
/// values, with midranks counted directly.
pub fn rank_sum_enumerated(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let ranks: Vec<f64> = pooled
        .iter()
        .map(|&v| {
            let less = pooled.iter().filter(|&&w| w < v).count() as f64;
            let equal = pooled.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let k = a.len();
    let centre = k as f64 * (n as f64 + 1.0) / 2.0;
    let obs = (ranks[..k].iter().sum::<f64>() - centre).abs();
    let (mut hit, mut total) = (0u64, 0u64);
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let s: f64 = pick.iter().map(|&i| ranks[i]).sum();
        total += 1;
        if (s - centre).abs() >= obs - 1e-9 {
            hit += 1;
        }
        // next k-combination in lexicographic order
        let mut i = k;
        while i > 0 && pick[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        pick[i - 1] += 1;
        for j in i..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
    hit as f64 / total as f64
}

/// Exact path against enumeration for every `(n1, n2)` with
/// `n1 <= 8` and `n1 <= n2 <= max_n2`, with ties; normal path against the
/// exact one on `n = 8` samples.
pub fn rank_sum_checks(max_n2: usize, exact_tol: f64, approx_tol: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = 0.0f64;
    for n1 in 1..=8usize {
        for n2 in n1..=max_n2.max(n1) {
            // coarse values so ties occur
            let a: Vec<f64> = (0..n1).map(|_| rng.random_range(0..10) as f64).collect();
            let b: Vec<f64> = (0..n2).map(|_| rng.random_range(0..10) as f64).collect();
            let Ok(p) = rank_sum_exact(&a, &b) else { continue };
            exact = exact.max((p - rank_sum_enumerated(&a, &b)).abs());
        }
    }
    let mut approx = 0.0f64;
    for _ in 0..200 {
        let shift = rng.random_range(0.0..1.5);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0) + shift).collect();
        approx = approx.max((rank_sum_exact(&a, &b)? - rank_sum_normal(&a, &b)?).abs());
    }
    Ok(vec![
        CheckOutcome::new("rank-sum exact vs enumeration", exact, exact_tol),
        CheckOutcome::new("rank-sum normal vs exact at n = 8", approx, approx_tol),
    ])
}

/// The `check` suite at reduced sizes.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let mut out = projector_checks(
        10,
        1000,
        7,
        200,
        ProjectorTolerances { identity: 1e-10, dense: 1e-9 },
        1,
    )?;
    out.extend(gradient_checks(32, 1e-6, 1e-4, 2)?);
    out.extend(tofts_checks(
        20,
        ToftsTolerances { closed_form: 1e-3, zero_ktrans: 1e-12, fit: 0.02 },
        3,
    )?);
    out.extend(rank_sum_checks(10, 1e-12, 0.02, 4)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_all().unwrap();
        for c in &a {
            assert!(c.passed, "{}", c.line());
        }
        assert_eq!(a, run_all().unwrap());
    }

    #[test]
    fn enumeration_example() {
        assert!((rank_sum_enumerated(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn failing_tolerance_is_reported() {
        let c = CheckOutcome::new("x", 2.0, 1.0);
        assert!(!c.passed);
        assert!(c.line().starts_with("FAIL"));
    }
}
