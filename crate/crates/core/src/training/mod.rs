//! Reverse-mode gradients, optimization and the synthetic training task.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod tape;
pub mod task;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, relative_error, CoordinateCheck, GradCheckReport, GRADIENT_SCALE_FLOOR};
pub use graph::{backward, forward_loss, loss_value, Example, LossGraph};
pub use tape::{Gradients, Tape, Var};
pub use task::{CentroidTask, Episode};
pub use trainer::{eval_episodes, eval_seed, loss_by_set_size, prefix_loss, train_minibatch, HistoryRow, TrainConfig, TrainOutcome, TrainState};
