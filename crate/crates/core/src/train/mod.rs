//! Losses, optimizer, synthetic data and the desk-scale training loop.

pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod teacher;
pub mod trainer;

pub use data::{BatchSampler, SyntheticDataset};
pub use gradcheck::{GradCheckConfig, GradCheckReport};
pub use loss::{cross_entropy, distill_loss};
pub use optim::{Adam, AdamConfig};
pub use teacher::Teacher;
pub use trainer::{descends, train_toy, write_trace, DistillOptions, ToyOptions, ToyRun, TracePoint};
pub use trainer::{evaluate, quartile_losses, smoothed_loss};
