//! Optimization, pretraining, finetuning protocols and rollout.

pub mod data;
pub mod evaluate;
pub mod finetune;
pub mod fit;
pub mod optim;
pub mod pretrain;
pub mod rollout;

pub use data::{lead_lattice, make_batch, Batch, Pair};
pub use fit::{fit, write_step_log, FitConfig, FitOutcome, StepRecord};
pub use optim::{lr_at, AdamW, OptimConfig};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome, PretrainSource};
pub use evaluate::{evaluate_forecast, ForecastMethod, ProjectionTask, DownscaleSplit};
pub use finetune::{
    downscale_splits, finetune_downscale, finetune_forecast, finetune_projection, projection_task, DownscaleSplits,
    FinetuneConfig, FinetuneOutcome, ProtocolMode, ProtocolSpec, Splits,
};
pub use rollout::{rollout, Rollout};
