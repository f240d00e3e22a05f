use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::FourierEncoding;
use super::loss::{loss_and_grad, LossBreakdown};
use super::optim::AdamState;
use super::scheduler::{PlateauScheduler, SchedulerConfig};
use super::siren::{SirenModel, DEFAULT_OMEGA0};
use crate::error::{Error, Result};
use crate::projection::{
    decompose_residual, factorize_rows, gram_factorize, GramFactorization, ProjectorSpec,
    ResidualDecomposition,
};
use crate::volumes::FeatureMatrix;

/// Which rows define the projector while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    /// Factorize each minibatch's own rows.
    #[default]
    Batch,
    /// Factorize the full dataset once; batches use the matching block.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub projector: ProjectorSpec,
    pub projection_scope: ProjectionScope,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub hidden: Vec<usize>,
    pub omega0: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            epochs: 75,
            batch_size: 4096,
            lr: 1e-5,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            projector: ProjectorSpec::default(),
            projection_scope: ProjectionScope::Batch,
            fourier_features: 128,
            fourier_sigma: 1.0,
            hidden: vec![512, 512, 512],
            omega0: DEFAULT_OMEGA0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < n_features.max(1) {
            return bad(format!(
                "batch_size {} smaller than feature count {n_features}",
                self.batch_size
            ));
        }
        if self.fourier_features == 0 || !(self.fourier_sigma > 0.0) {
            return bad("fourier_features and fourier_sigma must be positive".into());
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || !(s.min_lr >= 0.0) || !(s.rel_threshold >= 0.0) {
            return bad("scheduler factor must lie in (0,1), thresholds >= 0".into());
        }
        self.projector.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse_e: f64,
    pub mse_par: f64,
    pub total: f64,
    pub lr: f64,
}

/// Row order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, rows: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng);
    order
}

/// Splits an epoch's rows into batches. A trailing batch with fewer than
/// `min_rows` rows is folded into the one before it.
pub fn batch_bounds(rows: usize, batch_size: usize, min_rows: usize) -> Vec<(usize, usize)> {
    let mut bounds: Vec<(usize, usize)> = (0..rows)
        .step_by(batch_size.max(1))
        .map(|s| (s, (s + batch_size).min(rows)))
        .collect();
    if bounds.len() >= 2 {
        let (s, e) = *bounds.last().unwrap();
        if e - s < min_rows {
            bounds.pop();
            bounds.last_mut().unwrap().1 = e;
        }
    }
    bounds
}

/// Model plus the optimizer and scheduler state needed to continue training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SirenModel,
    pub optimizer: AdamState,
    pub scheduler: PlateauScheduler,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(n_features: usize, config: TrainConfig) -> Result<Self> {
        config.validate(n_features)?;
        let encoding = FourierEncoding::new(
            n_features,
            config.fourier_features,
            config.fourier_sigma,
            config.seed,
        )?;
        let model = SirenModel::init(encoding, &config.hidden, config.omega0, config.seed)?;
        let optimizer = AdamState::new(model.params().len());
        let scheduler = PlateauScheduler::new(config.scheduler, config.lr);
        Ok(Trainer {
            config,
            model,
            optimizer,
            scheduler,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn global_factorization(&self, x: &FeatureMatrix) -> Result<Option<GramFactorization>> {
        match self.config.projection_scope {
            ProjectionScope::Global => Ok(Some(gram_factorize(x, self.config.projector)?)),
            ProjectionScope::Batch => Ok(None),
        }
    }

    fn check_dataset(&self, x: &FeatureMatrix, y: &[f64]) -> Result<()> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows against {} targets",
                x.rows(),
                y.len()
            )));
        }
        if x.cols() != self.model.encoding().n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, dataset has {}",
                self.model.encoding().n_inputs(),
                x.cols()
            )));
        }
        if x.rows() < x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} rows, fewer than {} features",
                x.rows(),
                x.cols()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Unsanitized(x.index_map()[i]));
        }
        Ok(())
    }

    fn epoch_with(&mut self, x: &FeatureMatrix, y: &[f64], global: Option<&GramFactorization>) -> Result<EpochRecord> {
        let n = x.cols();
        let order = epoch_permutation(self.config.seed, self.epoch, x.rows());
        let lr = self.scheduler.lr;
        let mut sum = LossBreakdown::default();
        let mut feats = Vec::with_capacity(self.config.batch_size.min(x.rows()) * n);
        let mut targets = Vec::with_capacity(self.config.batch_size.min(x.rows()));
        for (s, e) in batch_bounds(x.rows(), self.config.batch_size, n) {
            feats.clear();
            targets.clear();
            for &r in &order[s..e] {
                feats.extend_from_slice(x.row(r));
                targets.push(y[r]);
            }
            let m = e - s;
            let local;
            let fact = match global {
                Some(f) => f,
                None => {
                    local = factorize_rows(&feats, m, n, self.config.projector)?;
                    &local
                }
            };
            let (loss, grads) = loss_and_grad(&self.model, &feats, &targets, fact, self.config.lambda)?;
            self.optimizer.step(self.model.params_mut(), &grads, lr)?;
            let w = m as f64;
            sum.mse_e += w * loss.mse_e;
            sum.mse_par += w * loss.mse_par;
            sum.total += w * loss.total;
        }
        let rows = x.rows() as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            mse_e: sum.mse_e / rows,
            mse_par: sum.mse_par / rows,
            total: sum.total / rows,
            lr,
        };
        self.scheduler.step(record.total);
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs a single epoch.
    pub fn run_epoch(&mut self, x: &FeatureMatrix, y: &[f64]) -> Result<EpochRecord> {
        self.check_dataset(x, y)?;
        let global = self.global_factorization(x)?;
        self.epoch_with(x, y, global.as_ref())
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        x: &FeatureMatrix,
        y: &[f64],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        self.check_dataset(x, y)?;
        let global = self.global_factorization(x)?;
        while !self.is_done() {
            let rec = self.epoch_with(x, y, global.as_ref())?;
            on_epoch(&rec);
        }
        Ok(())
    }
}

pub fn train(x: &FeatureMatrix, y: &[f64], config: &TrainConfig) -> Result<(SirenModel, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(x.cols(), config.clone())?;
    trainer.run(x, y, |_| {})?;
    Ok((trainer.model, trainer.history))
}

/// Predicts every row and decomposes the residual against a projector
/// factorized over all of `x`.
pub fn predict_and_decompose(
    model: &SirenModel,
    x: &FeatureMatrix,
    y: &[f64],
    spec: ProjectorSpec,
) -> Result<ResidualDecomposition> {
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows against {} targets",
            x.rows(),
            y.len()
        )));
    }
    let pred = model.predict(x.values(), x.rows())?;
    decompose_prediction(x, &pred, y, spec)
}

pub fn decompose_prediction(
    x: &FeatureMatrix,
    pred: &[f64],
    y: &[f64],
    spec: ProjectorSpec,
) -> Result<ResidualDecomposition> {
    let e: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
    let fact = gram_factorize(x, spec)?;
    decompose_residual(x, &fact, &e)
}
