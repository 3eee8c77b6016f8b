//! Targets, losses and the training loop.

pub mod loss;
pub mod targets;
pub mod trainer;

pub use loss::{entropy, loss, loss_graph, LossBreakdown, LossWeights};
pub use targets::{gt_heatmap, rot_to_bins, GtTargets, Heatmap};
pub use trainer::{train_loop, LogEntry, Sample, StepEvent, TrainConfig, TrainOutcome};
