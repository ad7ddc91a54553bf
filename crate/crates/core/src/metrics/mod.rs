//! Character error rate, loss-curve statistics and model evaluation.

mod cer;
mod curve;
mod eval;

pub use cer::{cer, levenshtein};
pub use curve::{curve_stats, curve_stats_values, CurveStats};
pub use eval::{decode_budget, evaluate_model, evaluate_transcriber, Decode, ModelTranscriber, Transcriber};

/// One meta-training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub outer_iter: usize,
    /// The combined loss in `msl` mode, the final-step loss in `maml` mode.
    pub outer_loss: f64,
    pub per_step_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub wall_ms: f64,
}
