//! Training and evaluation: one-cycle schedule, Adam, rank-based AUROC,
//! an analytic FLOP model with wall-clock measurement, flat-text run
//! configuration, and the deterministic training loop.

mod config;
mod flops;
mod metrics;
mod optim;
mod schedule;
mod train;

pub use config::{parse_run_config, run_config_entries, TrainConfig};
pub use flops::{flop_model, measure_forward, FlopReport};
pub use metrics::{accuracy, auroc_binary, auroc_macro, evaluate, EvalReport};
pub use optim::Adam;
pub use schedule::one_cycle_lr;
pub use train::{train, write_metrics, EpochRow};
