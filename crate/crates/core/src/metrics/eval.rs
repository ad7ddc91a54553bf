use super::cer::cer;
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, SequenceBatch, Source};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for Decode {
    type Err = Error;

    /// `greedy`, `beam` (width 5) or `beam:K`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Decode::Greedy),
            "beam" => Ok(Decode::Beam(5)),
            _ => s
                .strip_prefix("beam:")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(Decode::Beam)
                .ok_or_else(|| Error::Config(format!("bad decode spec {s:?}, expected greedy, beam or beam:K"))),
        }
    }
}

impl std::fmt::Display for Decode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decode::Greedy => write!(f, "greedy"),
            Decode::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

/// Decoding step budget for a source of `src_len` positions: a few steps
/// past the source length, capped by the model's maximum length.
pub fn decode_budget(model: &Seq2Seq, src_len: usize) -> usize {
    (src_len + 4).min(model.config().max_len)
}

fn source_len(src: &Source) -> usize {
    match src {
        Source::Tokens(rows) => rows[0].iter().filter(|&&t| t != crate::model::PAD).count(),
        Source::Features(maps) => maps[0].shape()[0],
    }
}

/// Anything that turns a single-example source into output tokens.
pub trait Transcriber {
    fn transcribe(&self, src: &Source, decode: Decode) -> Result<Vec<usize>>;
}

/// The transformer with fixed parameters.
pub struct ModelTranscriber<'a> {
    pub model: &'a Seq2Seq,
    pub params: &'a ParamSet,
}

impl Transcriber for ModelTranscriber<'_> {
    fn transcribe(&self, src: &Source, decode: Decode) -> Result<Vec<usize>> {
        let budget = decode_budget(self.model, source_len(src));
        let mut hyp = match decode {
            Decode::Greedy => self.model.greedy_decode(self.params, src, budget)?,
            Decode::Beam(k) => self.model.beam_decode(self.params, src, k, budget)?,
        };
        Ok(hyp.remove(0))
    }
}

/// Mean CER of `t` over every example of every batch.
pub fn evaluate_transcriber<T: Transcriber + ?Sized>(t: &T, batches: &[SequenceBatch], decode: Decode) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in batches {
        for b in 0..batch.batch_size() {
            let hyp = t.transcribe(&batch.src.row(b), decode)?;
            total += cer(&batch.reference(b), &hyp)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one example".into()));
    }
    Ok(total / n as f64)
}

/// Mean CER of the model over every example of every batch.
pub fn evaluate_model(model: &Seq2Seq, params: &ParamSet, batches: &[SequenceBatch], decode: Decode) -> Result<f64> {
    evaluate_transcriber(&ModelTranscriber { model, params }, batches, decode)
}
