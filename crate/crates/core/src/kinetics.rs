//! One-compartment Tofts model, a biexponential population AIF, a
//! least-squares voxel fitter and synthetic DCE series.
//!
//! Tissue concentration follows
//!
//! ```text
//! C_t(t) = vp·Cp(t) + Ktrans · ∫₀ᵗ Cp(τ) exp(-(Ktrans/ve)(t - τ)) dτ
//! ```
//!
//! with the convolution evaluated by the trapezoidal rule on the sample
//! grid. The trapezoid sum obeys a one-step recursion, so a whole curve
//! costs O(n) for uniform or non-uniform sampling alike.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{load_volume, save_volume, ChannelVolume, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::InvalidParameter("time grid needs >= 2 samples".into()));
        }
        if t[0] != 0.0 {
            return Err(Error::InvalidParameter(format!("time grid must start at 0, got {}", t[0])));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("time grid must be strictly increasing".into()));
        }
        Ok(TimeGrid { t })
    }

    /// `0, dt, 2dt, ..` up to and including `duration` (within rounding).
    pub fn uniform(dt: f64, duration: f64) -> Result<Self> {
        if !(dt > 0.0) || !(duration > 0.0) {
            return Err(Error::InvalidParameter("dt and duration must be > 0".into()));
        }
        let n = (duration / dt + 1e-9).floor() as usize;
        Self::new((0..=n).map(|k| k as f64 * dt).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Plasma concentration sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aif {
    cp: Vec<f64>,
}

impl Aif {
    /// Accepts any non-negative finite samples. Population curves start at
    /// zero; step inputs used for closed-form checks do not.
    pub fn new(cp: Vec<f64>) -> Result<Self> {
        if cp.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidParameter("AIF must be finite and non-negative".into()));
        }
        Ok(Aif { cp })
    }

    pub fn samples(&self) -> &[f64] {
        &self.cp
    }

    pub fn scaled(&self, c: f64) -> Result<Aif> {
        Aif::new(self.cp.iter().map(|v| v * c).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.cp.iter().all(|&c| c == 0.0)
    }
}

/// `A (exp(-d2 (t - delay)) - exp(-d1 (t - delay)))` after the delay, zero
/// before it.
pub fn population_aif(
    grid: &TimeGrid,
    delay: f64,
    amplitude: f64,
    decay1: f64,
    decay2: f64,
) -> Result<Aif> {
    if !(decay1 > decay2 && decay2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need decay1 > decay2 > 0, got {decay1}, {decay2}"
        )));
    }
    if !(amplitude >= 0.0) || !(delay >= 0.0) {
        return Err(Error::InvalidParameter("amplitude and delay must be >= 0".into()));
    }
    let cp = grid
        .times()
        .iter()
        .map(|&t| {
            if t < delay {
                0.0
            } else {
                let s = t - delay;
                (amplitude * ((-decay2 * s).exp() - (-decay1 * s).exp())).max(0.0)
            }
        })
        .collect();
    Aif::new(cp)
}

/// Time of the population AIF maximum.
pub fn population_aif_peak(delay: f64, decay1: f64, decay2: f64) -> f64 {
    delay + (decay1 / decay2).ln() / (decay1 - decay2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToftsParams {
    /// 1/s
    pub ktrans: f64,
    pub ve: f64,
    pub vp: f64,
}

impl ToftsParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        if !(p.ktrans >= 0.0 && p.ktrans.is_finite()) {
            return Err(Error::InvalidParameter(format!("Ktrans must be >= 0, got {}", p.ktrans)));
        }
        if p.ktrans > 0.0 && !(p.ve > 0.0) {
            return Err(Error::InvalidParameter("ve must be > 0 when Ktrans > 0".into()));
        }
        if !(p.ve >= 0.0 && p.ve <= 1.0) || !(p.vp >= 0.0 && p.vp < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ve must lie in [0,1] and vp in [0,1), got {}, {}",
                p.ve, p.vp
            )));
        }
        if p.ve + p.vp > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter("ve + vp must not exceed 1".into()));
        }
        Ok(())
    }
}

fn check_lengths(aif: &Aif, grid: &TimeGrid) -> Result<()> {
    if aif.cp.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            found: aif.cp.len(),
        });
    }
    Ok(())
}

/// Trapezoidal `∫₀ᵗ Cp(τ) exp(-k (t - τ)) dτ` at every grid time, and
/// optionally its derivative in `k`.
fn exp_convolution(cp: &[f64], t: &[f64], k: f64, want_deriv: bool) -> (Vec<f64>, Vec<f64>) {
    let n = t.len();
    let mut conv = vec![0.0; n];
    let mut dconv = if want_deriv { vec![0.0; n] } else { Vec::new() };
    for i in 1..n {
        let dt = t[i] - t[i - 1];
        let decay = (-k * dt).exp();
        conv[i] = decay * conv[i - 1] + 0.5 * dt * (cp[i - 1] * decay + cp[i]);
        if want_deriv {
            dconv[i] = decay * dconv[i - 1] - dt * decay * conv[i - 1] - 0.5 * dt * dt * cp[i - 1] * decay;
        }
    }
    (conv, dconv)
}

pub fn tofts_forward(p: &ToftsParams, aif: &Aif, grid: &TimeGrid) -> Result<Vec<f64>> {
    check_lengths(aif, grid)?;
    if p.ktrans > 0.0 && !(p.ve > 0.0) {
        return Err(Error::InvalidParameter("ve = 0 with Ktrans > 0".into()));
    }
    if p.ktrans == 0.0 {
        return Ok(aif.cp.iter().map(|c| p.vp * c).collect());
    }
    let (conv, _) = exp_convolution(&aif.cp, grid.times(), p.ktrans / p.ve, false);
    Ok(aif
        .cp
        .iter()
        .zip(&conv)
        .map(|(c, i)| p.vp * c + p.ktrans * i)
        .collect())
}

/// Model value and Jacobian columns for `(Ktrans, ve, vp, offset)`.
fn model_and_jacobian(theta: &[f64; 4], cp: &[f64], t: &[f64]) -> (Vec<f64>, Vec<[f64; 4]>) {
    let [ktrans, ve, vp, offset] = *theta;
    let kep = ktrans / ve;
    let (conv, dconv) = exp_convolution(cp, t, kep, true);
    let mut f = Vec::with_capacity(t.len());
    let mut jac = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        f.push(vp * cp[i] + ktrans * conv[i] + offset);
        jac.push([
            conv[i] + ktrans * dconv[i] / ve,
            -ktrans * ktrans * dconv[i] / (ve * ve),
            cp[i],
            1.0,
        ]);
    }
    (f, jac)
}

const KTRANS_MAX: f64 = 1.0;
const VE_MIN: f64 = 1e-4;

fn project_bounds(theta: &mut [f64; 4]) {
    theta[0] = theta[0].clamp(0.0, KTRANS_MAX);
    theta[1] = theta[1].clamp(VE_MIN, 1.0);
    theta[2] = theta[2].clamp(0.0, (1.0 - theta[1]).min(1.0 - 1e-9));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ToftsParams,
    /// Additive baseline fitted alongside the kinetic parameters.
    pub offset: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The AIF carries no signal, so only the offset is identifiable.
    pub degenerate: bool,
    /// A non-finite step occurred; the result is the best iterate seen.
    pub diverged: bool,
}

pub const FIT_MAX_ITERATIONS: usize = 200;
pub const FIT_REL_STEP: f64 = 1e-8;

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn solve4(a: [[f64; 4]; 4], b: [f64; 4]) -> Option<[f64; 4]> {
    let m = nalgebra::Matrix4::from_fn(|i, j| a[i][j]);
    let v = nalgebra::Vector4::from_column_slice(&b);
    m.cholesky().map(|c| {
        let x = c.solve(&v);
        [x[0], x[1], x[2], x[3]]
    })
}

/// Least-squares fit of `tofts_forward + offset` by Levenberg-Marquardt
/// with Marquardt diagonal scaling and projection onto the parameter
/// bounds after every step.
pub fn fit_tofts(curve: &[f64], aif: &Aif, grid: &TimeGrid, init: &ToftsParams) -> Result<FitResult> {
    check_lengths(aif, grid)?;
    if curve.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            found: curve.len(),
        });
    }
    if let Some(i) = curve.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("curve sample {i}")));
    }
    let t = grid.times();
    let cp = aif.samples();

    if aif.is_zero() {
        let offset = curve.iter().sum::<f64>() / curve.len() as f64;
        let resid: Vec<f64> = curve.iter().map(|c| c - offset).collect();
        return Ok(FitResult {
            params: ToftsParams {
                ktrans: 0.0,
                ve: init.ve.clamp(VE_MIN, 1.0),
                vp: 0.0,
            },
            offset,
            residual_norm: sum_sq(&resid).sqrt(),
            iterations: 0,
            converged: true,
            degenerate: true,
            diverged: false,
        });
    }

    let mut theta = [init.ktrans, init.ve, init.vp, curve[0]];
    project_bounds(&mut theta);
    let residuals = |theta: &[f64; 4]| {
        let (f, jac) = model_and_jacobian(theta, cp, t);
        let r: Vec<f64> = f.iter().zip(curve).map(|(a, b)| a - b).collect();
        (r, jac)
    };
    let (mut r, mut jac) = residuals(&theta);
    let mut cost = sum_sq(&r);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;

    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..4 {
                jtr[a] += row[a] * ri;
                for b in 0..4 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let mut accepted = false;
        // inner loop: raise damping until the step lowers the cost
        for _ in 0..30 {
            let mut damped = jtj;
            for a in 0..4 {
                damped[a][a] += mu * jtj[a][a].max(1e-30);
            }
            let Some(delta) = solve4(damped, jtr.map(|v| -v)) else {
                mu *= 10.0;
                continue;
            };
            let mut cand = theta;
            for a in 0..4 {
                cand[a] += delta[a];
            }
            project_bounds(&mut cand);
            if cand.iter().any(|v| !v.is_finite()) {
                diverged = true;
                mu *= 10.0;
                continue;
            }
            let (rc, jc) = residuals(&cand);
            let cc = sum_sq(&rc);
            if cc.is_finite() && cc <= cost {
                let step: f64 = (0..4)
                    .map(|a| ((cand[a] - theta[a]) / theta[a].abs().max(1e-6)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                theta = cand;
                r = rc;
                jac = jc;
                cost = cc;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if step < FIT_REL_STEP {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            // no descent direction left at any damping: a stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }
    Ok(FitResult {
        params: ToftsParams {
            ktrans: theta[0],
            ve: theta[1],
            vp: theta[2],
        },
        offset: theta[3],
        residual_norm: cost.sqrt(),
        iterations,
        converged,
        degenerate: false,
        diverged,
    })
}

/// Per-voxel Tofts curves plus i.i.d. Gaussian noise, one volume per time
/// point. Reproducible for a given seed.
pub fn generate_dce(
    params: &[ToftsParams],
    grid: GridSpec,
    aif: &Aif,
    times: &TimeGrid,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<ChannelVolume>> {
    if params.len() != grid.voxel_count() {
        return Err(Error::LengthMismatch {
            expected: grid.voxel_count(),
            found: params.len(),
        });
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let nt = times.len();
    let mut frames = vec![vec![0.0; params.len()]; nt];
    for (i, p) in params.iter().enumerate() {
        p.validate()?;
        let curve = tofts_forward(p, aif, times)?;
        for k in 0..nt {
            frames[k][i] = curve[k];
        }
    }
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("validated sd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for frame in &mut frames {
            for v in frame.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    frames
        .into_iter()
        .enumerate()
        .map(|(k, data)| ChannelVolume::new(frame_name(k), grid, data))
        .collect()
}

fn frame_name(k: usize) -> String {
    format!("dce_{k:03}")
}

/// Sidecar listing the frames of a DCE series and their acquisition times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub times_s: Vec<f64>,
    pub frames: Vec<String>,
}

pub const SERIES_MANIFEST: &str = "dce.json";

pub fn save_series(dir: &Path, frames: &[ChannelVolume], times: &TimeGrid) -> Result<()> {
    if frames.len() != times.len() {
        return Err(Error::LengthMismatch {
            expected: times.len(),
            found: frames.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..frames.len()).map(frame_name).collect();
    for (f, name) in frames.iter().zip(&names) {
        save_volume(f, dir.join(name))?;
    }
    let manifest = SeriesManifest {
        times_s: times.times().to_vec(),
        frames: names,
    };
    let path = dir.join(SERIES_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_series(dir: &Path) -> Result<(Vec<ChannelVolume>, TimeGrid)> {
    let path = dir.join(SERIES_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SeriesManifest = serde_json::from_str(&text)?;
    if manifest.frames.len() != manifest.times_s.len() {
        return Err(Error::LengthMismatch {
            expected: manifest.times_s.len(),
            found: manifest.frames.len(),
        });
    }
    let frames = manifest
        .frames
        .iter()
        .map(|f| load_volume(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, TimeGrid::new(manifest.times_s)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_1s() -> TimeGrid {
        TimeGrid::uniform(1.0, 240.0).unwrap()
    }

    fn pop(grid: &TimeGrid) -> Aif {
        population_aif(grid, 10.0, 6.0, 0.5, 0.01).unwrap()
    }

    #[test]
    fn zero_ktrans_is_scaled_aif() {
        let g = grid_1s();
        let aif = pop(&g);
        let p = ToftsParams { ktrans: 0.0, ve: 0.3, vp: 0.07 };
        let c = tofts_forward(&p, &aif, &g).unwrap();
        for (a, b) in c.iter().zip(aif.samples()) {
            assert_eq!(*a, 0.07 * b);
        }
    }

    #[test]
    fn constant_aif_matches_closed_form() {
        let g = grid_1s();
        let c0 = 2.5;
        let aif = Aif::new(vec![c0; g.len()]).unwrap();
        for &(ktrans, ve, vp) in &[(0.005, 0.3, 0.05), (0.01, 0.2, 0.1), (0.002, 0.5, 0.0)] {
            let p = ToftsParams { ktrans, ve, vp };
            let c = tofts_forward(&p, &aif, &g).unwrap();
            for (k, &t) in g.times().iter().enumerate().skip(1) {
                let exact = vp * c0 + c0 * ve * (1.0 - (-ktrans * t / ve).exp());
                assert!(((c[k] - exact) / exact).abs() < 1e-3, "t={t}");
            }
        }
    }

    #[test]
    fn quadrature_converges_at_second_order() {
        let c0 = 1.0;
        let p = ToftsParams { ktrans: 0.02, ve: 0.2, vp: 0.0 };
        let t_end = 240.0;
        let exact = c0 * p.ve * (1.0 - (-p.ktrans * t_end / p.ve).exp());
        let mut errs = Vec::new();
        for dt in [4.0, 2.0, 1.0, 0.5] {
            let g = TimeGrid::uniform(dt, t_end).unwrap();
            let aif = Aif::new(vec![c0; g.len()]).unwrap();
            let c = tofts_forward(&p, &aif, &g).unwrap();
            errs.push((c.last().unwrap() - exact).abs());
        }
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.1, "order {order}");
        }
    }

    #[test]
    fn stiff_limit_tracks_ve_times_aif() {
        let g = TimeGrid::uniform(0.01, 240.0).unwrap();
        let aif = pop(&g);
        let p = ToftsParams { ktrans: 5.0, ve: 0.4, vp: 0.0 };
        let c = tofts_forward(&p, &aif, &g).unwrap();
        let peak = aif.samples().iter().copied().fold(0.0, f64::max);
        for (k, &t) in g.times().iter().enumerate() {
            if t > 30.0 {
                let target = 0.4 * aif.samples()[k];
                assert!((c[k] - target).abs() < 1e-3 * peak, "t={t}");
            }
        }
    }

    #[test]
    fn linear_in_aif_and_non_negative() {
        let g = grid_1s();
        let aif = pop(&g);
        let p = ToftsParams { ktrans: 0.004, ve: 0.35, vp: 0.04 };
        let base = tofts_forward(&p, &aif, &g).unwrap();
        let scaled = tofts_forward(&p, &aif.scaled(3.7).unwrap(), &g).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((3.7 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            assert!(*a >= 0.0);
        }
    }

    #[test]
    fn rejects_ve_zero_with_transfer() {
        let g = grid_1s();
        let p = ToftsParams { ktrans: 0.01, ve: 0.0, vp: 0.0 };
        assert!(tofts_forward(&p, &pop(&g), &g).is_err());
    }

    #[test]
    fn population_aif_properties() {
        let g = TimeGrid::uniform(0.001, 60.0).unwrap();
        let aif = population_aif(&g, 5.0, 3.0, 0.6, 0.02).unwrap();
        for (t, c) in g.times().iter().zip(aif.samples()) {
            if *t < 5.0 {
                assert_eq!(*c, 0.0);
            }
        }
        let argmax = aif
            .samples()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let expect = population_aif_peak(5.0, 0.6, 0.02);
        assert!((g.times()[argmax] - expect).abs() <= 0.001);

        let double = population_aif(&g, 5.0, 6.0, 0.6, 0.02).unwrap();
        for (a, b) in aif.samples().iter().zip(double.samples()) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(population_aif(&g, 5.0, 3.0, 0.01, 0.02).is_err());
    }

    fn random_params(rng: &mut ChaCha8Rng) -> ToftsParams {
        ToftsParams {
            ktrans: rng.random_range(0.002..0.01),
            ve: rng.random_range(0.2..0.5),
            vp: rng.random_range(0.02..0.1),
        }
    }

    const INIT: ToftsParams = ToftsParams { ktrans: 0.005, ve: 0.3, vp: 0.05 };

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let g = TimeGrid::uniform(2.0, 240.0).unwrap();
        let aif = pop(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let offset = rng.random_range(0.0..2.0);
            let curve: Vec<f64> = tofts_forward(&p, &aif, &g).unwrap().iter().map(|c| c + offset).collect();
            let fit = fit_tofts(&curve, &aif, &g, &INIT).unwrap();
            assert!(fit.converged && !fit.degenerate);
            assert!(((fit.params.ktrans - p.ktrans) / p.ktrans).abs() < 0.02);
            assert!(((fit.params.ve - p.ve) / p.ve).abs() < 0.02);
            assert!(((fit.params.vp - p.vp) / p.vp).abs() < 0.02);
            assert!((fit.offset - offset).abs() < 1e-3);

            // refitting from the optimum stays put
            let again = fit_tofts(&curve, &aif, &g, &fit.params).unwrap();
            assert!(((again.params.ktrans - fit.params.ktrans) / fit.params.ktrans).abs() < 1e-6);
            assert!(((again.params.ve - fit.params.ve) / fit.params.ve).abs() < 1e-6);
            assert!(((again.params.vp - fit.params.vp) / fit.params.vp).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_aif_fit_is_degenerate() {
        let g = grid_1s();
        let aif = Aif::new(vec![0.0; g.len()]).unwrap();
        let fit = fit_tofts(&vec![0.0; g.len()], &aif, &g, &INIT).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.params.ktrans, 0.0);
        assert_eq!(fit.params.vp, 0.0);
    }

    #[test]
    fn fit_rejects_non_finite_curve() {
        let g = grid_1s();
        let mut curve = vec![0.0; g.len()];
        curve[3] = f64::NAN;
        assert!(fit_tofts(&curve, &pop(&g), &g, &INIT).is_err());
    }

    #[test]
    fn noisy_fits_have_small_median_error() {
        let g = TimeGrid::uniform(2.0, 240.0).unwrap();
        let aif = pop(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut errs = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..100 {
            let p = random_params(&mut rng);
            let clean = tofts_forward(&p, &aif, &g).unwrap();
            let peak = clean.iter().copied().fold(0.0, f64::max);
            let noise = Normal::new(0.0, 0.01 * peak).unwrap();
            let curve: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
            let fit = fit_tofts(&curve, &aif, &g, &INIT).unwrap();
            errs[0].push(((fit.params.ktrans - p.ktrans) / p.ktrans).abs());
            errs[1].push(((fit.params.ve - p.ve) / p.ve).abs());
            errs[2].push(((fit.params.vp - p.vp) / p.vp).abs());
        }
        for e in &mut errs {
            e.sort_by(f64::total_cmp);
            assert!(e[50] < 0.10, "median {}", e[50]);
        }
    }

    #[test]
    fn generate_dce_is_exact_without_noise_and_seeded() {
        let grid = GridSpec::with_dims([2, 2, 1]).unwrap();
        let times = TimeGrid::uniform(5.0, 240.0).unwrap();
        let aif = pop(&times);
        let params = vec![
            ToftsParams { ktrans: 0.003, ve: 0.3, vp: 0.05 },
            ToftsParams { ktrans: 0.006, ve: 0.4, vp: 0.02 },
            ToftsParams { ktrans: 0.0, ve: 0.2, vp: 0.1 },
            ToftsParams { ktrans: 0.009, ve: 0.25, vp: 0.08 },
        ];
        let frames = generate_dce(&params, grid, &aif, &times, 0.0, 1).unwrap();
        for (i, p) in params.iter().enumerate() {
            let c = tofts_forward(p, &aif, &times).unwrap();
            for k in 0..times.len() {
                assert_eq!(frames[k].data[i], c[k]);
            }
        }
        let a = generate_dce(&params, grid, &aif, &times, 0.01, 9).unwrap();
        let b = generate_dce(&params, grid, &aif, &times, 0.01, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_series_round_trips_through_fit() {
        let grid = GridSpec::with_dims([3, 1, 1]).unwrap();
        let times = TimeGrid::uniform(2.0, 240.0).unwrap();
        let aif = pop(&times);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: Vec<ToftsParams> = (0..3).map(|_| random_params(&mut rng)).collect();
        let frames = generate_dce(&params, grid, &aif, &times, 0.0, 0).unwrap();
        for (i, p) in params.iter().enumerate() {
            let curve: Vec<f64> = frames.iter().map(|f| f.data[i]).collect();
            let fit = fit_tofts(&curve, &aif, &times, &INIT).unwrap();
            assert!(((fit.params.ktrans - p.ktrans) / p.ktrans).abs() < 0.02);
            assert!(((fit.params.ve - p.ve) / p.ve).abs() < 0.02);
            assert!(((fit.params.vp - p.vp) / p.vp).abs() < 0.02);
        }
    }

    #[test]
    fn series_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::with_dims([2, 1, 1]).unwrap();
        let times = TimeGrid::new(vec![0.0, 30.0, 90.0]).unwrap();
        let frames: Vec<ChannelVolume> = (0..3)
            .map(|k| ChannelVolume::new(frame_name(k), grid, vec![k as f64, 0.5]).unwrap())
            .collect();
        save_series(dir.path(), &frames, &times).unwrap();
        let (back, t) = load_series(dir.path()).unwrap();
        assert_eq!(back, frames);
        assert_eq!(t, times);
    }
}
