//! Deterministic desk-scale training.

pub mod corpus;
pub mod optim;
mod run;
pub mod schedule;
pub mod spikes;
pub mod synthetic;
pub mod trace;

pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, ParamSlot};
pub use run::{
    run_sweep, summary_csv, train_run, write_outcome, EvalSpec, ScheduleSpec, SweepGrid,
    TrainOutcome, TrainRun,
};
pub use schedule::{lr_at, Schedule};
pub use spikes::{detect_spikes, Spike, SpikeConfig};
pub use trace::LossTrace;
