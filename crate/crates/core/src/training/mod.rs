//! Targets, losses and the optimization loop.

pub mod labels;
pub mod loss;
pub mod trainer;

pub use labels::{
    boundary_labels, duration_labels, generate_boundary_labels, generate_duration_labels, BoundaryLabels,
    DurationLabels,
};
pub use loss::{loss_act, loss_total, loss_wb, LossReport, TermCounts, DEFAULT_LAMBDA};
pub use trainer::{EpochReport, Example, TrainConfig, Trainer};
