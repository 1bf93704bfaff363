//! The slow/fast multi-task network, its configuration and keyframe schedule.

mod config;
mod eval;
mod layers;
mod model;
pub mod schedule;

pub use config::{EncoderConfig, NetworkConfig, Propagation, Stage, TaskKind};
pub use layers::{Encoder, IlaEdge, SeBlock, TaskBranch};
pub use model::{CachedFrame, FrameOutput, PropagationState, SlowFastNet};
pub use schedule::{build_schedule, build_schedule_routed, Branch, Routing, ScheduleEntry, ScheduleMode};
pub use eval::{eval_offset_averaged, OffsetMetrics};
