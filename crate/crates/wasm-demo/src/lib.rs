//! Browser bindings for the demo page in `www/`: a Tofts curve explorer, a
//! noisy Tofts fit, and a small phantom trained and decomposed in place.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively.

use orthosep::eval::{regional_mse, RegionalErrorTable};
use orthosep::inr::{TrainConfig, Trainer};
use orthosep::inr::train::decompose_prediction;
use orthosep::kinetics::{fit_tofts, population_aif, tofts_forward, TimeGrid, ToftsParams};
use orthosep::phantom::{generate, PhantomSpec};
use orthosep::preprocess::{assemble_features, FeatureSelection};
use orthosep::projection::{ProjectorSpec, ResidualDecomposition};
use orthosep::volumes::{FeatureMatrix, RegionMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

const DT_S: f64 = 2.0;
const DURATION_S: f64 = 300.0;
const AIF_DELAY_S: f64 = 10.0;
const AIF_AMPLITUDE: f64 = 6.0;
const AIF_DECAY1: f64 = 0.5;
const AIF_DECAY2: f64 = 0.01;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Sampled AIF and tissue curve for one parameter set.
#[wasm_bindgen]
pub struct Curves {
    times: Vec<f64>,
    aif: Vec<f64>,
    tissue: Vec<f64>,
}

#[wasm_bindgen]
impl Curves {
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    pub fn aif(&self) -> Vec<f64> {
        self.aif.clone()
    }

    pub fn tissue(&self) -> Vec<f64> {
        self.tissue.clone()
    }
}

/// `ktrans_per_min` is in 1/min as usually quoted; the model runs in seconds.
pub fn curves(ktrans_per_min: f64, ve: f64, vp: f64) -> orthosep::Result<Curves> {
    let grid = TimeGrid::uniform(DT_S, DURATION_S)?;
    let aif = population_aif(&grid, AIF_DELAY_S, AIF_AMPLITUDE, AIF_DECAY1, AIF_DECAY2)?;
    let p = ToftsParams { ktrans: ktrans_per_min / 60.0, ve, vp };
    let tissue = tofts_forward(&p, &aif, &grid)?;
    Ok(Curves {
        times: grid.times().to_vec(),
        aif: aif.samples().to_vec(),
        tissue,
    })
}

#[wasm_bindgen]
pub fn tofts_curves(ktrans_per_min: f64, ve: f64, vp: f64) -> Result<Curves, JsError> {
    curves(ktrans_per_min, ve, vp).map_err(js)
}

/// Noisy samples of a curve and the parameters recovered from them.
#[wasm_bindgen]
pub struct FitDemo {
    noisy: Vec<f64>,
    fitted: Vec<f64>,
    /// Ktrans (1/min), ve, vp, offset, iterations, converged.
    summary: Vec<f64>,
}

#[wasm_bindgen]
impl FitDemo {
    pub fn noisy(&self) -> Vec<f64> {
        self.noisy.clone()
    }

    pub fn fitted(&self) -> Vec<f64> {
        self.fitted.clone()
    }

    pub fn summary(&self) -> Vec<f64> {
        self.summary.clone()
    }
}

pub fn fit(ktrans_per_min: f64, ve: f64, vp: f64, noise_sd: f64, seed: u64) -> orthosep::Result<FitDemo> {
    let c = curves(ktrans_per_min, ve, vp)?;
    let grid = TimeGrid::new(c.times.clone())?;
    let aif = population_aif(&grid, AIF_DELAY_S, AIF_AMPLITUDE, AIF_DECAY1, AIF_DECAY2)?;
    let normal = Normal::new(0.0, noise_sd.max(0.0))
        .map_err(|e| orthosep::Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = c.tissue.iter().map(|v| v + normal.sample(&mut rng)).collect();
    let init = ToftsParams { ktrans: 0.005, ve: 0.3, vp: 0.05 };
    let r = fit_tofts(&noisy, &aif, &grid, &init)?;
    let fitted = tofts_forward(&r.params, &aif, &grid)?
        .into_iter()
        .map(|v| v + r.offset)
        .collect();
    Ok(FitDemo {
        noisy,
        fitted,
        summary: vec![
            r.params.ktrans * 60.0,
            r.params.ve,
            r.params.vp,
            r.offset,
            r.iterations as f64,
            r.converged as u8 as f64,
        ],
    })
}

#[wasm_bindgen]
pub fn tofts_fit(ktrans_per_min: f64, ve: f64, vp: f64, noise_sd: f64, seed: u32) -> Result<FitDemo, JsError> {
    fit(ktrans_per_min, ve, vp, noise_sd, seed as u64).map_err(js)
}

/// A small phantom, a network training on it, and the latest decomposition.
#[wasm_bindgen]
pub struct Decomposer {
    x: FeatureMatrix,
    y: Vec<f64>,
    mask: RegionMask,
    trainer: Trainer,
    decomp: Option<(Vec<f64>, ResidualDecomposition)>,
}

pub fn demo_phantom(amplitude: f64, seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [28, 28, 16],
        seed,
        prostate_radius_vox: 6.0,
        tumour_radius_vox: 3.0,
        ortho_amplitude: amplitude,
        ..PhantomSpec::default()
    }
}

pub fn demo_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: usize::MAX,
        batch_size: 512,
        lr: 2e-4,
        fourier_features: 32,
        hidden: vec![64, 64],
        seed,
        ..TrainConfig::default()
    }
}

impl Decomposer {
    pub fn create(amplitude: f64, seed: u64) -> orthosep::Result<Self> {
        let data = generate(&demo_phantom(amplitude, seed))?.dataset;
        let (x, y) = assemble_features(&data.volumes, &data.mask, &FeatureSelection::full(), &data.target)?;
        let trainer = Trainer::new(x.cols(), demo_config(seed))?;
        Ok(Decomposer { x, y, mask: data.mask, trainer, decomp: None })
    }

    /// Trains `epochs` more epochs and returns the last epoch's total loss.
    pub fn train(&mut self, epochs: usize) -> orthosep::Result<f64> {
        let mut last = f64::NAN;
        for _ in 0..epochs {
            last = self.trainer.run_epoch(&self.x, &self.y)?.total;
        }
        let pred = self.trainer.model.predict(self.x.values(), self.x.rows())?;
        let d = decompose_prediction(&self.x, &pred, &self.y, ProjectorSpec::default())?;
        self.decomp = Some((pred, d));
        Ok(last)
    }

    pub fn table(&self) -> orthosep::Result<Option<RegionalErrorTable>> {
        self.decomp.as_ref().map(|(_, d)| regional_mse(d, &self.mask)).transpose()
    }

    /// One axial slice of `panel` (`target`, `reconstruction`, `r_par2` or
    /// `r_perp2`), row-major `ny x nx`, zero outside the body.
    pub fn panel(&self, panel: &str, z: usize) -> Option<Vec<f64>> {
        let [nx, ny, nz] = self.mask.grid.dims;
        if z >= nz {
            return None;
        }
        let (pred, d) = self.decomp.as_ref()?;
        let value = |k: usize| match panel {
            "target" => Some(self.y[k]),
            "reconstruction" => Some(pred[k]),
            "r_par2" => Some(d.r_par[k] * d.r_par[k]),
            "r_perp2" => Some(d.r_perp[k] * d.r_perp[k]),
            _ => None,
        };
        let mut out = vec![0.0; nx * ny];
        let lo = z * nx * ny;
        for (k, &i) in d.index_map.iter().enumerate() {
            if (lo..lo + nx * ny).contains(&i) {
                out[i - lo] = value(k)?;
            }
        }
        Some(out)
    }
}

#[wasm_bindgen]
impl Decomposer {
    #[wasm_bindgen(constructor)]
    pub fn new(amplitude: f64, seed: u32) -> Result<Decomposer, JsError> {
        Self::create(amplitude, seed as u64).map_err(js)
    }

    pub fn step(&mut self, epochs: u32) -> Result<f64, JsError> {
        self.train(epochs as usize).map_err(js)
    }

    pub fn epoch(&self) -> u32 {
        self.trainer.epoch as u32
    }

    pub fn width(&self) -> u32 {
        self.mask.grid.dims[0] as u32
    }

    pub fn height(&self) -> u32 {
        self.mask.grid.dims[1] as u32
    }

    pub fn depth(&self) -> u32 {
        self.mask.grid.dims[2] as u32
    }

    pub fn slice(&self, panel: &str, z: u32) -> Result<Vec<f64>, JsError> {
        self.panel(panel, z as usize)
            .ok_or_else(|| JsError::new("unknown panel, slice out of range, or not trained yet"))
    }

    /// Regional table as JSON, `null` before the first step.
    pub fn regional_json(&self) -> Result<String, JsError> {
        let t = self.table().map_err(js)?;
        serde_json::to_string(&t).map_err(js)
    }
}
