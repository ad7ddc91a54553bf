//! Meta-learning with a multi-step loss: a small reverse-mode autodiff
//! engine, a miniature encoder-decoder, synthetic task families,
//! first-order MAML and its multi-step-loss variant, and evaluation metrics.

pub mod error;
pub mod learner;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use learner::{eval_loss, loss_and_grad, Learner};
pub use meta::{
    fine_tune, inner_adapt, meta_train, msl_combine, outer_grad, per_step_target_losses, InnerConfig, MetaRun, Mode,
    OptimizerKind, OuterConfig, WeightSchedule,
};
pub use metrics::{cer, curve_stats, evaluate_model, CurveStats, Decode, RunRecord};
pub use model::{ModelConfig, Seq2Seq, SequenceBatch};
pub use params::ParamSet;
pub use tasks::{Episode, TaskSampler};
pub use tensor::{Graph, Tensor, Var};
