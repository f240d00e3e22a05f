//! Synthetic datasets with a known answer.
//!
//! Seven feature channels are smooth random fields inside an ellipsoidal
//! body, with a spherical prostate and a tumour sphere inside it. The
//! target is `g(x) + c·u + noise`, where `g` is a fixed function of the
//! feature vector and `u` is confined to the tumour and orthogonal to the
//! feature columns, so no function of the features can explain it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::kinetics::{generate_dce, Aif, TimeGrid, ToftsParams};
use crate::numeric;
use crate::preprocess::{
    assemble_features, default_bindings, normalize_all, FeatureSelection, CANONICAL_FEATURES,
    TARGET_CHANNEL,
};
use crate::projection::{factorize_rows, project_rows, xt_times, ProjectorSpec};
use crate::volumes::{
    bounding_box_crop, save_volume, ChannelVolume, FeatureMatrix, GridSpec, Label,
    MultiChannelVolume, RegionMask,
};

pub const TRUTH_FILE: &str = "phantom_truth.json";
pub const ENVELOPE_CHANNEL: &str = "envelope";
pub const ORTHO_CHANNEL: &str = "ortho";

/// Relative bound on `‖Xᵀu‖ / (‖X‖_F ‖u‖)` after orthogonalization.
pub const ORTHO_TOLERANCE: f64 = 1e-6;

/// Generator of the learnable part of the target. Weights are indexed in
/// canonical feature order (T1, T2, ADC, Ktrans, ve, vp, TTP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Envelope {
    /// `scale · softplus(w·x + bias)`
    SoftplusAffine { weights: Vec<f64>, bias: f64, scale: f64 },
    /// `w·x + bias`
    Affine { weights: Vec<f64>, bias: f64 },
}

impl Default for Envelope {
    fn default() -> Self {
        Envelope::SoftplusAffine {
            weights: vec![0.8, 1.5, -1.2, 6.0, 0.0, 0.0, 0.7],
            bias: -0.5,
            scale: 0.5,
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

impl Envelope {
    pub fn id(&self) -> &'static str {
        match self {
            Envelope::SoftplusAffine { .. } => "softplus_affine",
            Envelope::Affine { .. } => "affine",
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Envelope::SoftplusAffine { weights, .. } | Envelope::Affine { weights, .. } => weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.len() != CANONICAL_FEATURES.len() {
            return Err(Error::InvalidParameter(format!(
                "envelope needs {} weights, got {}",
                CANONICAL_FEATURES.len(),
                w.len()
            )));
        }
        let extra = match self {
            Envelope::SoftplusAffine { bias, scale, .. } => vec![*bias, *scale],
            Envelope::Affine { bias, .. } => vec![*bias],
        };
        if w.iter().chain(&extra).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("envelope coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Features with a non-zero weight.
    pub fn used_features(&self) -> Vec<&'static str> {
        CANONICAL_FEATURES
            .iter()
            .zip(self.weights())
            .filter(|(_, w)| **w != 0.0)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn decoy_features(&self) -> Vec<&'static str> {
        CANONICAL_FEATURES
            .iter()
            .zip(self.weights())
            .filter(|(_, w)| **w == 0.0)
            .map(|(n, _)| *n)
            .collect()
    }

    /// `x` in canonical order.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Envelope::SoftplusAffine { weights, bias, scale } => {
                scale * softplus(numeric::dot(weights, x) + bias)
            }
            Envelope::Affine { weights, bias } => numeric::dot(weights, x) + bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub n_blobs: usize,
    pub prostate_radius_vox: f64,
    pub tumour_radius_vox: f64,
    pub envelope: Envelope,
    /// Root-mean-square of the injected orthogonal signal over the tumour.
    pub ortho_amplitude: f64,
    pub noise_sd: f64,
}

impl Default for PhantomSpec {
    /// About 3·10⁴ valid voxels.
    fn default() -> Self {
        PhantomSpec {
            dims: [46, 46, 32],
            seed: 0,
            n_blobs: 12,
            prostate_radius_vox: 9.0,
            tumour_radius_vox: 4.0,
            envelope: Envelope::default(),
            ortho_amplitude: 0.0,
            noise_sd: 0.0,
        }
    }
}

impl PhantomSpec {
    fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    /// Body semi-axes, one voxel short of the grid faces.
    fn body_axes(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 2.0) / 2.0)
    }

    fn tumour_centre(&self) -> [f64; 3] {
        let mut c = self.centre();
        c[0] += (self.prostate_radius_vox - self.tumour_radius_vox) / 2.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        GridSpec::with_dims(self.dims)?;
        self.envelope.validate()?;
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidParameter("phantom dims must be >= 4".into()));
        }
        if self.n_blobs == 0 {
            return Err(Error::InvalidParameter("n_blobs must be >= 1".into()));
        }
        let (rp, rt) = (self.prostate_radius_vox, self.tumour_radius_vox);
        if !(rt > 0.0 && rp > 0.0) {
            return Err(Error::InvalidParameter("radii must be > 0".into()));
        }
        let offset = (rp - rt) / 2.0;
        if !(offset + rt < rp) {
            return Err(Error::InvalidParameter(
                "tumour sphere must lie strictly inside the prostate".into(),
            ));
        }
        let min_axis = self.body_axes().iter().copied().fold(f64::INFINITY, f64::min);
        if !(rp < min_axis) {
            return Err(Error::InvalidParameter(format!(
                "prostate radius {rp} must be below the smallest body semi-axis {min_axis}"
            )));
        }
        for (name, v) in [("ortho_amplitude", self.ortho_amplitude), ("noise_sd", self.noise_sd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Labels and validity on the uncropped grid.
pub fn make_regions(spec: &PhantomSpec) -> Result<RegionMask> {
    spec.validate()?;
    let grid = GridSpec::with_dims(spec.dims)?;
    let (c, ax, tc) = (spec.centre(), spec.body_axes(), spec.tumour_centre());
    let n = grid.voxel_count();
    let mut labels = vec![Label::Background; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        let p = grid.coords(i).map(|v| v as f64);
        let body: f64 = (0..3).map(|k| ((p[k] - c[k]) / ax[k]).powi(2)).sum();
        if body > 1.0 {
            continue;
        }
        valid[i] = true;
        labels[i] = if dist2(p, tc) <= spec.tumour_radius_vox.powi(2) {
            Label::Tumour
        } else if dist2(p, c) <= spec.prostate_radius_vox.powi(2) {
            Label::Prostate
        } else {
            Label::Surrounding
        };
    }
    RegionMask::new(grid, labels, valid)
}

/// Baseline and blob amplitude of each raw channel, in rough physical units.
const RAW_SCALES: [(f64, f64); 7] = [
    (1200.0, 300.0), // T1, ms
    (80.0, 30.0),    // T2, ms
    (1.2e-3, 0.5e-3), // ADC, mm²/s
    (0.1, 0.08),     // Ktrans, 1/min
    (0.3, 0.15),     // ve
    (0.05, 0.03),    // vp
    (90.0, 60.0),    // TTP, s
];

fn blob_field(grid: &GridSpec, valid: &[bool], base: f64, amp: f64, n_blobs: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let blobs: Vec<([f64; 3], f64, f64)> = (0..n_blobs)
        .map(|_| {
            let centre = grid.dims.map(|d| rng.random_range(0.0..d as f64));
            let sigma: f64 = rng.random_range(3.0..8.0);
            let a = amp * rng.random_range(-1.0..1.0);
            (centre, sigma, a)
        })
        .collect();
    (0..grid.voxel_count())
        .map(|i| {
            if !valid[i] {
                return 0.0;
            }
            let p = grid.coords(i).map(|v| v as f64);
            let v = base
                + blobs
                    .iter()
                    .map(|(c, s, a)| a * (-dist2(p, *c) / (2.0 * s * s)).exp())
                    .sum::<f64>();
            // keep every body voxel strictly positive so it stays non-zero
            v.max(0.05 * base)
        })
        .collect()
}

/// Raw blob fields for the seven canonical channels, zero outside the body.
pub fn make_raw_fields(spec: &PhantomSpec, regions: &RegionMask) -> Result<MultiChannelVolume> {
    let grid = regions.grid;
    let channels = CANONICAL_FEATURES
        .iter()
        .zip(RAW_SCALES)
        .enumerate()
        .map(|(k, (name, (base, amp)))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(10 + k as u64);
            let data = blob_field(&grid, &regions.valid, base, amp, spec.n_blobs, &mut rng);
            ChannelVolume::new(*name, grid, data)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelVolume::new(channels)
}

/// Raw fields cropped to the body and normalized with the default rules.
pub fn make_feature_fields(spec: &PhantomSpec) -> Result<(MultiChannelVolume, RegionMask)> {
    let regions = make_regions(spec)?;
    let raw = make_raw_fields(spec, &regions)?;
    let (cropped, mask) = bounding_box_crop(&raw, &regions)?;
    let normalized = normalize_all(&cropped, &default_bindings(), &mask.valid)?;
    Ok((normalized, mask))
}

/// `(I - P) z` with a pseudo-inverse projector, restricted to `support`.
///
/// Rows outside the support are zeroed and the projection is built from the
/// support rows alone, so the result lives on the support and is orthogonal
/// to every column of `x`. A second pass removes the round-off left by the
/// first.
pub fn orthogonalize_against(x: &FeatureMatrix, z: &[f64], support: Option<&[bool]>) -> Result<Vec<f64>> {
    let m = x.rows();
    let n = x.cols();
    if z.len() != m {
        return Err(Error::LengthMismatch { expected: m, found: z.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("orthogonalization input".into()));
    }
    let rows: Vec<usize> = match support {
        Some(s) => {
            if s.len() != m {
                return Err(Error::LengthMismatch { expected: m, found: s.len() });
            }
            (0..m).filter(|&i| s[i]).collect()
        }
        None => (0..m).collect(),
    };
    if rows.is_empty() {
        return Err(Error::EmptySelection("orthogonalization support is empty".into()));
    }
    let sub = x.select_rows(&rows);
    let fact = factorize_rows(sub.values(), rows.len(), n, ProjectorSpec::pinv())?;
    let mut u: Vec<f64> = rows.iter().map(|&i| z[i]).collect();
    let z_norm = numeric::norm(&u);
    for _ in 0..2 {
        let p = project_rows(sub.values(), rows.len(), &fact, &u)?;
        for (a, b) in u.iter_mut().zip(&p) {
            *a -= b;
        }
    }
    if !(numeric::norm(&u) > 1e-8 * z_norm) || z_norm == 0.0 {
        return Err(Error::NoOrthogonalContent);
    }
    let mut out = vec![0.0; m];
    for (&i, v) in rows.iter().zip(&u) {
        out[i] = *v;
    }
    Ok(out)
}

/// `‖Xᵀu‖ / (‖X‖_F ‖u‖)`.
pub fn orthogonality_residual(x: &FeatureMatrix, u: &[f64]) -> f64 {
    let xtu = xt_times(x.values(), x.rows(), x.cols(), u);
    numeric::norm(&xtu) / (numeric::norm(x.values()) * numeric::norm(u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetComponents {
    pub target: ChannelVolume,
    pub envelope: ChannelVolume,
    /// `c·u`
    pub ortho: ChannelVolume,
}

/// Builds `y = g(x) + c·u + noise` over valid voxels; invalid voxels are 0.
pub fn make_target(features: &MultiChannelVolume, mask: &RegionMask, spec: &PhantomSpec) -> Result<TargetComponents> {
    spec.validate()?;
    let grid = mask.grid;
    let n_vox = grid.voxel_count();
    let cols: Vec<&ChannelVolume> = CANONICAL_FEATURES
        .iter()
        .map(|c| features.require(c))
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; n_vox];
    let mut x = [0.0; 7];
    for i in (0..n_vox).filter(|&i| mask.valid[i]) {
        for (k, c) in cols.iter().enumerate() {
            x[k] = c.data[i];
        }
        g[i] = spec.envelope.eval(&x);
    }

    let mut ortho = vec![0.0; n_vox];
    if spec.ortho_amplitude > 0.0 {
        let mut all = features.clone();
        all.push(ChannelVolume::filled(TARGET_CHANNEL, grid, 0.0)?)?;
        let (fm, _) = assemble_features(&all, mask, &FeatureSelection::full(), TARGET_CHANNEL)?;
        let idx = fm.index_map();
        let support: Vec<bool> = idx.iter().map(|&i| mask.labels[i] == Label::Tumour).collect();
        if !support.iter().any(|s| *s) {
            return Err(Error::EmptySelection("orthogonal signal needs tumour voxels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(30);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let z: Vec<f64> = support
            .iter()
            .map(|&s| if s { normal.sample(&mut rng) } else { 0.0 })
            .collect();
        let u = orthogonalize_against(&fm, &z, Some(&support))?;
        let n_t = support.iter().filter(|s| **s).count() as f64;
        let rms = (numeric::dot(&u, &u) / n_t).sqrt();
        for (&i, v) in idx.iter().zip(&u) {
            ortho[i] = spec.ortho_amplitude * v / rms;
        }
    }

    let mut y: Vec<f64> = g.iter().zip(&ortho).map(|(a, b)| a + b).collect();
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(31);
        let normal = Normal::new(0.0, spec.noise_sd).expect("validated sd");
        for i in (0..n_vox).filter(|&i| mask.valid[i]) {
            y[i] += normal.sample(&mut rng);
        }
    }
    Ok(TargetComponents {
        target: ChannelVolume::new(TARGET_CHANNEL, grid, y)?,
        envelope: ChannelVolume::new(ENVELOPE_CHANNEL, grid, g)?,
        ortho: ChannelVolume::new(ORTHO_CHANNEL, grid, ortho)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionEnergy {
    pub n_voxels: usize,
    pub sum_sq: f64,
    pub mean_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub envelope_id: String,
    pub envelope: Envelope,
    pub used_features: Vec<String>,
    pub ortho_amplitude: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub valid_voxels: usize,
    /// Energy of `c·u` per region (tumour, prostate, surrounding).
    pub ortho_energy: Vec<(String, RegionEnergy)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub dataset: Dataset,
    pub envelope: ChannelVolume,
    pub ortho: ChannelVolume,
    pub truth: PhantomTruth,
}

pub fn region_name(label: Label) -> &'static str {
    match label {
        Label::Background => "background",
        Label::Surrounding => "surrounding",
        Label::Prostate => "prostate",
        Label::Tumour => "tumour",
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let (features, mask) = make_feature_fields(spec)?;
    let comps = make_target(&features, &mask, spec)?;
    let mut volumes = features;
    volumes.push(comps.target)?;
    let ortho_energy = [Label::Tumour, Label::Prostate, Label::Surrounding]
        .iter()
        .map(|&l| {
            let vals: Vec<f64> = (0..mask.labels.len())
                .filter(|&i| mask.valid[i] && mask.labels[i] == l)
                .map(|i| comps.ortho.data[i])
                .collect();
            let sum_sq = numeric::dot(&vals, &vals);
            let e = RegionEnergy {
                n_voxels: vals.len(),
                sum_sq,
                mean_sq: if vals.is_empty() { 0.0 } else { sum_sq / vals.len() as f64 },
            };
            (region_name(l).to_string(), e)
        })
        .collect();
    let truth = PhantomTruth {
        envelope_id: spec.envelope.id().into(),
        envelope: spec.envelope.clone(),
        used_features: spec.envelope.used_features().iter().map(|s| s.to_string()).collect(),
        ortho_amplitude: spec.ortho_amplitude,
        noise_sd: spec.noise_sd,
        seed: spec.seed,
        spec: spec.clone(),
        valid_voxels: mask.valid.iter().filter(|v| **v).count(),
        ortho_energy,
    };
    Ok(Phantom {
        dataset: Dataset {
            volumes,
            mask,
            target: TARGET_CHANNEL.into(),
            target_scale: 1.0,
        },
        envelope: comps.envelope,
        ortho: comps.ortho,
        truth,
    })
}

/// Synthetic DCE frames on the cropped phantom grid, driven by the raw
/// Ktrans (converted from 1/min to 1/s), ve and vp fields. Voxels outside
/// the body stay at zero.
pub fn make_dce(
    spec: &PhantomSpec,
    times: &TimeGrid,
    aif: &Aif,
    noise_sd: f64,
) -> Result<(Vec<ChannelVolume>, RegionMask)> {
    let regions = make_regions(spec)?;
    let raw = make_raw_fields(spec, &regions)?;
    let (cropped, mask) = bounding_box_crop(&raw, &regions)?;
    let (kt, ve, vp) = (cropped.require("Ktrans")?, cropped.require("ve")?, cropped.require("vp")?);
    let params: Vec<ToftsParams> = (0..mask.valid.len())
        .map(|i| {
            if !mask.valid[i] {
                return ToftsParams { ktrans: 0.0, ve: 0.0, vp: 0.0 };
            }
            let e = ve.data[i].clamp(0.02, 0.9);
            ToftsParams {
                ktrans: kt.data[i] / 60.0,
                ve: e,
                vp: vp.data[i].clamp(0.0, 0.99 - e),
            }
        })
        .collect();
    let frames = generate_dce(&params, mask.grid, aif, times, noise_sd, spec.seed)?;
    Ok((frames, mask))
}

/// Writes the dataset, the two target components and `phantom_truth.json`.
pub fn save_phantom(dir: &Path, p: &Phantom) -> Result<()> {
    save_dataset(dir, &p.dataset)?;
    save_volume(&p.envelope, dir.join(ENVELOPE_CHANNEL))?;
    save_volume(&p.ortho, dir.join(ORTHO_CHANNEL))?;
    let path = dir.join(TRUTH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&p.truth)? + "\n").map_err(|e| Error::io(&path, e))
}
