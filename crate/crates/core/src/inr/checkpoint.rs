//! Model checkpoints: a JSON manifest, a little-endian f64 weight blob and
//! an optimizer blob, enough to resume training bit for bit.
//!
//! `weights.raw` holds the Fourier matrix `B` (`F x N`, row-major) followed
//! by every layer's weight matrix (`out x in`, row-major) and bias, first
//! layer first. `optimizer.raw` holds Adam's `m`, `v` and `v_max` in that
//! order, each in parameter order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoding::FourierEncoding;
use super::optim::AdamState;
use super::scheduler::PlateauScheduler;
use super::siren::{param_count, SirenModel};
use super::train::{EpochRecord, TrainConfig, Trainer};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.raw";
pub const OPTIMIZER_FILE: &str = "optimizer.raw";
pub const HISTORY_FILE: &str = "history.csv";
const FORMAT: &str = "orthosep-siren";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub epoch: usize,
    pub adam_step: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr: f64,
    /// `null` until the first epoch has been scored.
    pub best_loss: Option<f64>,
    pub bad_epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub n_inputs: usize,
    pub feature_names: Vec<String>,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub widths: Vec<usize>,
    pub omega0: f64,
    pub seed: u64,
    pub param_count: usize,
    pub config: TrainConfig,
    pub state: TrainingState,
    pub history: Vec<EpochRecord>,
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::LengthMismatch {
            expected: expected * 8,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mse_e,mse_par,total,lr\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.mse_e, r.mse_par, r.total, r.lr
        );
    }
    out
}

/// Writes the manifest, weights, optimizer state and history CSV.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, feature_names: &[String]) -> Result<()> {
    let model = &trainer.model;
    let enc = model.encoding();
    if feature_names.len() != enc.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature names for a model with {} inputs",
            feature_names.len(),
            enc.n_inputs()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best = trainer.scheduler.best;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        n_inputs: enc.n_inputs(),
        feature_names: feature_names.to_vec(),
        fourier_features: enc.n_frequencies(),
        fourier_sigma: enc.sigma(),
        widths: model.widths().to_vec(),
        omega0: model.omega0(),
        seed: trainer.config.seed,
        param_count: model.params().len(),
        config: trainer.config.clone(),
        state: TrainingState {
            epoch: trainer.epoch,
            adam_step: trainer.optimizer.step,
            adam_beta1: trainer.optimizer.beta1,
            adam_beta2: trainer.optimizer.beta2,
            adam_eps: trainer.optimizer.eps,
            lr: trainer.scheduler.lr,
            best_loss: best.is_finite().then_some(best),
            bad_epochs: trainer.scheduler.bad_epochs,
        },
        history: trainer.history.clone(),
    };
    let mut weights = f64_bytes(enc.matrix());
    weights.extend(f64_bytes(model.params()));
    write(&dir.join(WEIGHTS_FILE), &weights)?;
    let opt = &trainer.optimizer;
    let mut state = f64_bytes(&opt.m);
    state.extend(f64_bytes(&opt.v));
    state.extend(f64_bytes(&opt.v_max));
    write(&dir.join(OPTIMIZER_FILE), &state)?;
    write(&dir.join(HISTORY_FILE), history_csv(&trainer.history).as_bytes())?;
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Header {
            path,
            msg: format!("unsupported checkpoint {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

/// Model weights only, for prediction.
pub fn load_model(dir: &Path) -> Result<(SirenModel, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let n_b = m.fourier_features * m.n_inputs;
    let n_p = param_count(&m.widths);
    if n_p != m.param_count {
        return Err(Error::LengthMismatch {
            expected: m.param_count,
            found: n_p,
        });
    }
    let mut blob = read_f64s(&dir.join(WEIGHTS_FILE), n_b + n_p)?;
    let params = blob.split_off(n_b);
    let enc = FourierEncoding::from_matrix(m.n_inputs, m.fourier_features, m.fourier_sigma, blob)?;
    let model = SirenModel::from_parts(enc, m.widths.clone(), m.omega0, params)?;
    Ok((model, m))
}

/// Full trainer state; continuing it matches an uninterrupted run exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, Vec<String>)> {
    let (model, m) = load_model(dir)?;
    let n = m.param_count;
    let blob = read_f64s(&dir.join(OPTIMIZER_FILE), 3 * n)?;
    let optimizer = AdamState {
        beta1: m.state.adam_beta1,
        beta2: m.state.adam_beta2,
        eps: m.state.adam_eps,
        step: m.state.adam_step,
        m: blob[..n].to_vec(),
        v: blob[n..2 * n].to_vec(),
        v_max: blob[2 * n..].to_vec(),
    };
    let scheduler = PlateauScheduler {
        config: m.config.scheduler,
        lr: m.state.lr,
        best: m.state.best_loss.unwrap_or(f64::INFINITY),
        bad_epochs: m.state.bad_epochs,
    };
    let trainer = Trainer {
        config: m.config,
        model,
        optimizer,
        scheduler,
        epoch: m.state.epoch,
        history: m.history,
    };
    Ok((trainer, m.feature_names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::FeatureMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (FeatureMatrix, Vec<f64>, TrainConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (96, 3);
        let x: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = (0..m).map(|i| x[i * n] - 0.5 * x[i * n + 1] + 0.2).collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 40,
            lr: 1e-3,
            fourier_features: 8,
            hidden: vec![16, 16],
            seed: 11,
            ..TrainConfig::default()
        };
        (FeatureMatrix::from_rows(m, n, x).unwrap(), y, cfg)
    }

    fn names() -> Vec<String> {
        ["a", "b", "c"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (x, y, cfg) = toy();
        let mut t = Trainer::new(3, cfg).unwrap();
        t.run_epoch(&x, &y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, &names()).unwrap();
        let (back, feats) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(feats, names());
        assert_eq!(back.model, t.model);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.scheduler, t.scheduler);
        assert_eq!(back.history, t.history);
        assert_eq!(back.epoch, 1);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (x, y, cfg) = toy();
        let mut straight = Trainer::new(3, cfg.clone()).unwrap();
        straight.run(&x, &y, |_| {}).unwrap();

        let mut first = Trainer::new(3, cfg).unwrap();
        first.run_epoch(&x, &y).unwrap();
        first.run_epoch(&x, &y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &first, &names()).unwrap();
        let (mut resumed, _) = load_checkpoint(dir.path()).unwrap();
        resumed.run(&x, &y, |_| {}).unwrap();
        assert_eq!(resumed.model.params(), straight.model.params());
        assert_eq!(resumed.history, straight.history);
    }

    #[test]
    fn fresh_scheduler_best_is_null() {
        let (_, _, cfg) = toy();
        let t = Trainer::new(3, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, &names()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.state.best_loss, None);
        let (back, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.scheduler.best, f64::INFINITY);
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let (_, _, cfg) = toy();
        let t = Trainer::new(3, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, &names()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn history_csv_shape() {
        let rec = EpochRecord { epoch: 0, mse_e: 0.5, mse_par: 0.25, total: 0.75, lr: 1e-5 };
        let csv = history_csv(&[rec, EpochRecord { epoch: 1, ..rec }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,mse_e,mse_par,total,lr");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,5.0"));
    }
}
