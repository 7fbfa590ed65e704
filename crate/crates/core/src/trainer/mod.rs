//! AdamW with decoupled weight decay, cosine learning-rate decay, the
//! training loop and its checkpoint format.

mod adamw;
mod checkpoint;
mod schedule;
#[cfg(test)]
mod tests;
mod train;

pub use adamw::{adamw_step, AdamHyper, OptimState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use schedule::{cosine_lr, REFERENCE_LR_INIT};
pub use train::{
    annotated_view, read_metrics, run_training, RunOutputs, StepMetrics, TrainConfig, Trainer,
};
