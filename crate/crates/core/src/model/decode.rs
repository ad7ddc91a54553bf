//! Greedy and beam-search decoding.
//!
//! Both decoders are written against [`StepScorer`], so they can be driven
//! by the transformer or by hand-built probability tables. Scores are plain
//! sums of log-probabilities (no length normalization) and every tie is
//! broken toward the lexicographically smaller token path.

use std::cmp::Ordering;

use super::batch::{Source, BOS, EOS};
use super::transformer::Seq2Seq;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Next-token distribution given decoded prefixes.
pub trait StepScorer {
    fn eos(&self) -> usize;

    /// Log-probabilities over the vocabulary for each prefix. Every prefix
    /// starts with the BOS token, and all prefixes in one call share a length.
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A decoded sequence. `tokens` excludes BOS and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// True when the sequence ended with EOS rather than the step budget.
    pub finished: bool,
}

impl Hypothesis {
    fn path_key(&self, eos: usize) -> Vec<usize> {
        let mut k = self.tokens.clone();
        if self.finished {
            k.push(eos);
        }
        k
    }
}

/// Higher score first, then smaller token path.
fn rank(a_score: f64, a_path: &[usize], b_score: f64, b_path: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_path.cmp(b_path))
}

fn better(a: &Hypothesis, b: &Hypothesis, eos: usize) -> bool {
    rank(a.log_prob, &a.path_key(eos), b.log_prob, &b.path_key(eos)) == Ordering::Less
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn with_bos(path: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(path.iter().copied()).collect()
}

pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &S, max_steps: usize) -> Result<Hypothesis> {
    let eos = scorer.eos();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_steps {
        let lp = scorer.next_log_probs(&[with_bos(&tokens)])?;
        let next = argmax(&lp[0]);
        log_prob += lp[0][next];
        if next == eos {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(next);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

/// Beam search keeping `beam_size` hypotheses per step.
///
/// Hypotheses that emit EOS leave the beam; when the step budget runs out
/// the surviving hypotheses count as complete. The search stops early once
/// a completed hypothesis strictly outscores every live one, which cannot
/// change the result because scores never increase.
///
/// The greedy hypothesis is carried as a reference and returned when the
/// beam loses it and finds nothing better, so the result never scores below
/// greedy decoding.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    beam_size: usize,
    max_steps: usize,
) -> Result<Hypothesis> {
    if beam_size < 1 {
        return Err(Error::Contract("beam_size must be at least 1".into()));
    }
    let best = plain_beam_search(scorer, beam_size, max_steps)?;
    if beam_size == 1 {
        return Ok(best);
    }
    let greedy = greedy_search(scorer, max_steps)?;
    Ok(if better(&greedy, &best, scorer.eos()) {
        greedy
    } else {
        best
    })
}

/// Beam search without the greedy reference.
pub fn plain_beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    beam_size: usize,
    max_steps: usize,
) -> Result<Hypothesis> {
    if beam_size < 1 {
        return Err(Error::Contract("beam_size must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| with_bos(p)).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((path, score), lp) in live.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut p = path.clone();
                p.push(tok);
                candidates.push((p, score + l));
            }
        }
        candidates.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        candidates.truncate(beam_size);
        live.clear();
        for (mut path, score) in candidates {
            if path.last() == Some(&eos) {
                path.pop();
                done.push(Hypothesis {
                    tokens: path,
                    log_prob: score,
                    finished: true,
                });
            } else {
                live.push((path, score));
            }
        }
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        if best_done > best_live {
            break;
        }
    }
    done.extend(live.into_iter().map(|(tokens, log_prob)| Hypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best.as_ref().is_none_or(|b| better(&h, b, eos)) {
            best = Some(h);
        }
    }
    Ok(best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }))
}

/// The transformer bound to parameters and one encoded source.
pub struct ModelScorer<'a> {
    model: &'a Seq2Seq,
    params: &'a ParamSet,
    memory: Tensor,
    key_pad: Vec<bool>,
}

impl<'a> ModelScorer<'a> {
    /// Encodes the single-example `src` once for repeated decoder calls.
    pub fn new(model: &'a Seq2Seq, params: &'a ParamSet, src: &Source) -> Result<Self> {
        if src.batch_size() != 1 {
            return Err(Error::Contract("ModelScorer takes a single-example source".into()));
        }
        let (memory, key_pad) = model.encode_one(params, src)?;
        Ok(Self {
            model,
            params,
            memory,
            key_pad,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn eos(&self) -> usize {
        EOS
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model
            .next_log_probs(self.params, &self.memory, &self.key_pad, prefixes)
    }
}

fn check_steps(model: &Seq2Seq, max_steps: usize) -> Result<()> {
    if max_steps > model.config().max_len {
        return Err(Error::Contract(format!(
            "max_steps {max_steps} exceeds model max_len {}",
            model.config().max_len
        )));
    }
    Ok(())
}

impl Seq2Seq {
    /// Greedy decoding of every example in `src`.
    pub fn greedy_decode(&self, params: &ParamSet, src: &Source, max_steps: usize) -> Result<Vec<Vec<usize>>> {
        check_steps(self, max_steps)?;
        (0..src.batch_size())
            .map(|b| {
                let scorer = ModelScorer::new(self, params, &src.row(b))?;
                Ok(greedy_search(&scorer, max_steps)?.tokens)
            })
            .collect()
    }

    /// Beam decoding of every example in `src`.
    pub fn beam_decode(
        &self,
        params: &ParamSet,
        src: &Source,
        beam_size: usize,
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if beam_size < 1 {
            return Err(Error::Contract("beam_size must be at least 1".into()));
        }
        check_steps(self, max_steps)?;
        (0..src.batch_size())
            .map(|b| {
                let scorer = ModelScorer::new(self, params, &src.row(b))?;
                Ok(beam_search(&scorer, beam_size, max_steps)?.tokens)
            })
            .collect()
    }
}
