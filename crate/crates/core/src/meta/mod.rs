//! Inner-loop adaptation, the multi-step loss and first-order meta-training.

mod adapt;
mod optim;
mod outer;
mod schedule;
mod train;

pub use adapt::{
    inner_adapt, msl_combine, msl_combine_values, per_step_target_losses, AdaptTrajectory, InnerConfig,
};
pub use optim::{Optimizer, OptimizerKind};
pub use outer::{outer_grad, Mode, OuterGrad};
pub use schedule::WeightSchedule;
pub use train::{fine_tune, meta_train, EpisodeSource, MetaRun, OuterConfig};
