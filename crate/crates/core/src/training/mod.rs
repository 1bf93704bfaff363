//! Losses, the discriminator used for feature mimicking, Adam, and the
//! joint training step.

mod adam;
mod discriminator;
mod log;
mod loss;
mod step;

pub use adam::{AdamConfig, AdamState};
pub use discriminator::Discriminator;
pub use log::TrainLog;
pub use loss::{mimic_loss, task_loss, LossConfig, MimicTerms, TaskTarget, D_EPS};
pub use step::{LossBreakdown, TrainClip, Trainer};
