//! Learners: the miniature encoder-decoder and two small numeric models.

mod batch;
pub mod checkpoint;
mod config;
pub mod decode;
mod small;
mod transformer;

pub use batch::{symbol_to_token, token_to_symbol, SequenceBatch, Source, BOS, EOS, FIRST_SYMBOL, PAD};
pub use config::{ConvConfig, ModelConfig};
pub use decode::{beam_search, greedy_search, plain_beam_search, Hypothesis, ModelScorer, StepScorer};
pub use small::{Mlp, Quadratic, RegressionBatch, ScalarBatch};
pub use transformer::{positional_encoding, Seq2Seq};
