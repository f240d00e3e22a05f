//! Fourier-feature SIREN regressor trained with the projection-regularized
//! loss.

pub mod checkpoint;
pub mod encoding;
pub mod loss;
pub mod optim;
pub mod scheduler;
pub mod siren;
pub mod train;

pub use encoding::FourierEncoding;
pub use loss::{loss_and_grad, residual_loss, LossBreakdown};
pub use optim::AdamState;
pub use scheduler::{PlateauScheduler, SchedulerConfig};
pub use siren::SirenModel;
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint};
pub use train::{
    predict_and_decompose, train, EpochRecord, ProjectionScope, TrainConfig, Trainer,
};
