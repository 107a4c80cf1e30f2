//! Experiment orchestration for PEFT studies on the SAM-style model:
//! training with early stopping, task evaluation, sweeps and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod run;
pub mod sweep;
pub mod train;
