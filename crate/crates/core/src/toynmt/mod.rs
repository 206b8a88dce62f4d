//! A small pre-norm encoder-decoder used to study quantization-aware
//! retraining end to end.

pub mod config;
pub mod data;
pub mod infer;
pub mod model;
pub mod sweep;
pub mod tape;
pub mod train;

pub use config::{lr_at, ToyModelConfig, TrainSchedule};
pub use data::{Example, SyntheticTask, Task};
pub use infer::{forward, InferenceModel, Kernel};
pub use model::ToyModel;
pub use train::{multiphase_retrain, phase_plans, pnr_retrain, train_dense, LossHistory, RetrainOutcome, TrainOptions};
pub use sweep::{sensitivity_sweep, SweepRow, SweepTable, PASSTHROUGH_BITS};
