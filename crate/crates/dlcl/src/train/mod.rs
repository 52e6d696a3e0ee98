//! Training harness: Adam with warmup/inverse-sqrt schedule, gradient
//! accumulation, synthetic sequence tasks, checkpoint persistence and
//! averaging, and greedy/beam decoding.

mod adam;
mod beam;
mod checkpoint;
mod schedule;
mod task;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use beam::{beam_search_decode, greedy_decode, length_penalty, BeamConfig, Hypothesis};
pub use checkpoint::{average_checkpoints, Checkpoint};
pub use schedule::{lr_at, SchedulerConfig};
pub use task::{generate_task_batch, TaskKind, TaskSpec};
pub use trainer::{accumulate_gradients, evaluate, train_loop, MetricsRow, TrainOptions, TrainOutcome};
