//! Initialization, optimization, schedules, losses, the training loop and
//! checkpoints.

pub mod checkpoint;
pub mod data;
pub mod fit;
pub mod init;
pub mod loss;
pub mod optim;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{Dataset, Sample};
pub use fit::{fit, AugmentConfig, ClaheMode, EpochRecord, FitOutcome, TrainConfig, TrainState};
pub use init::{he_uniform_bound, he_uniform_init};
pub use loss::{cross_entropy, moex_loss};
pub use optim::{adam_step, sgd_step, Optimizer, OptimizerConfig};
pub use schedule::{cosine_lr, CosineSchedule, ScheduleConfig};
