use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Id of the first ordinary symbol; symbol `s` is token `FIRST_SYMBOL + s`.
pub const FIRST_SYMBOL: usize = 3;

pub fn symbol_to_token(s: usize) -> usize {
    s + FIRST_SYMBOL
}

/// Inverse of [`symbol_to_token`]; `None` for special tokens.
pub fn token_to_symbol(t: usize) -> Option<usize> {
    t.checked_sub(FIRST_SYMBOL)
}

/// Encoder input: padded token ids or per-example feature maps.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// `[B×S]`, right-padded with [`PAD`].
    Tokens(Vec<Vec<usize>>),
    /// One `[time × freq]` map per example; all maps share a shape.
    Features(Vec<Tensor>),
}

impl Source {
    pub fn batch_size(&self) -> usize {
        match self {
            Source::Tokens(rows) => rows.len(),
            Source::Features(maps) => maps.len(),
        }
    }

    /// The `b`-th example as a one-row source.
    pub fn row(&self, b: usize) -> Source {
        match self {
            Source::Tokens(rows) => Source::Tokens(vec![rows[b].clone()]),
            Source::Features(maps) => Source::Features(vec![maps[b].clone()]),
        }
    }
}

/// Teacher-forced sequence pairs.
///
/// `tgt_in` is the target prefixed with [`BOS`]; `tgt_out` is the target
/// followed by [`EOS`]. Both are right-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub src: Source,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
}

fn pad_to(rows: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, PAD);
            r
        })
        .collect()
}

fn teacher_forcing(targets: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let tin: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let tout: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    (pad_to(&tin), pad_to(&tout))
}

impl SequenceBatch {
    /// Builds a batch from `(source tokens, target tokens)` pairs, neither
    /// containing special tokens.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateBatch("no sequence pairs".into()));
        }
        let src: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| s.clone()).collect();
        if src.iter().any(Vec::is_empty) {
            return Err(Error::DegenerateBatch("empty source sequence".into()));
        }
        let targets: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
        let (tgt_in, tgt_out) = teacher_forcing(&targets);
        Ok(Self {
            src: Source::Tokens(pad_to(&src)),
            tgt_in,
            tgt_out,
        })
    }

    /// Feature-map sources with token targets.
    pub fn from_features(maps: Vec<Tensor>, targets: &[Vec<usize>]) -> Result<Self> {
        if maps.is_empty() || maps.len() != targets.len() {
            return Err(Error::DegenerateBatch(format!(
                "{} feature maps for {} targets",
                maps.len(),
                targets.len()
            )));
        }
        let shape = maps[0].shape().to_vec();
        if shape.len() != 2 || maps.iter().any(|m| m.shape() != shape.as_slice()) {
            return Err(Error::dim("feature batch", &shape, maps.last().unwrap().shape()));
        }
        let (tgt_in, tgt_out) = teacher_forcing(targets);
        Ok(Self {
            src: Source::Features(maps),
            tgt_in,
            tgt_out,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.tgt_in.len()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_in.first().map_or(0, Vec::len)
    }

    /// Unpadded target of example `b`, without [`EOS`].
    pub fn reference(&self, b: usize) -> Vec<usize> {
        self.tgt_out[b]
            .iter()
            .copied()
            .take_while(|&t| t != EOS && t != PAD)
            .collect()
    }

    /// Checks padding and the shift-by-one alignment of `tgt_in`/`tgt_out`.
    pub fn validate(&self) -> Result<()> {
        let b = self.batch_size();
        if b == 0 || self.src.batch_size() != b || self.tgt_out.len() != b {
            return Err(Error::DegenerateBatch("batch components disagree in size".into()));
        }
        let t = self.tgt_len();
        for (row_in, row_out) in self.tgt_in.iter().zip(&self.tgt_out) {
            if row_in.len() != t || row_out.len() != t {
                return Err(Error::dim("tgt", &[row_in.len()], &[row_out.len()]));
            }
            for i in 0..t.saturating_sub(1) {
                if row_out[i] != PAD && row_in[i + 1] != PAD && row_in[i + 1] != row_out[i] {
                    return Err(Error::Contract(format!(
                        "tgt_in/tgt_out misaligned at position {i}"
                    )));
                }
            }
        }
        if let Source::Tokens(rows) = &self.src {
            let s = rows[0].len();
            if rows.iter().any(|r| r.len() != s) {
                return Err(Error::Contract("ragged source rows".into()));
            }
        }
        Ok(())
    }
}
