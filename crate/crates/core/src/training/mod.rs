//! Training-recipe mathematics and the desk-scale trainer.

mod data;
mod dropblock;
mod loss;
mod mixup;
mod optim;
mod schedule;
mod trainer;

pub use data::{synthetic_patterns, Dataset};
pub use dropblock::{dropblock_gamma, dropblock_mask};
pub use loss::{label_smooth_ce, one_hot, smooth_targets, soft_target_ce, LossConfig};
pub use mixup::{mixup_batch, mixup_with_lambdas, sample_lambdas, MixupConfig};
pub use optim::{sgd_update, OptimizerConfig, Sgd};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{train_toy, EpochMetrics, TrainConfig, Trainer, TRAIN_KEYS};
