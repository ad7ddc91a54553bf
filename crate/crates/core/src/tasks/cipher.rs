use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TaskFamily;
use crate::error::{Error, Result};
use crate::model::{symbol_to_token, SequenceBatch, FIRST_SYMBOL};
use crate::tensor::Tensor;

/// A substitution-cipher "language": each source symbol maps to one target
/// symbol through a fixed permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherTask {
    pub cipher: Vec<usize>,
}

impl CipherTask {
    pub fn identity(alphabet: usize) -> Self {
        Self {
            cipher: (0..alphabet).collect(),
        }
    }

    pub fn apply(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.cipher[s]).collect()
    }

    pub fn inverse(&self) -> CipherTask {
        let mut inv = vec![0; self.cipher.len()];
        for (s, &t) in self.cipher.iter().enumerate() {
            inv[t] = s;
        }
        CipherTask { cipher: inv }
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.cipher.len()];
        for &t in &self.cipher {
            if t >= seen.len() || seen[t] {
                return false;
            }
            seen[t] = true;
        }
        true
    }
}

/// Random cipher languages over a shared alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherFamily {
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a target symbol is replaced by a uniform draw.
    pub noise_rate: f64,
    /// When set, sources are rendered as `[len × n_freq]` feature maps
    /// instead of token ids.
    pub feature_bins: Option<usize>,
}

impl Default for CipherFamily {
    fn default() -> Self {
        Self {
            alphabet: 20,
            min_len: 5,
            max_len: 15,
            noise_rate: 0.1,
            feature_bins: None,
        }
    }
}

/// Seed of the fixed per-symbol spectral signatures; shared by every task.
const SIGNATURE_SEED: u64 = 0x5EC7_0A11;
const FEATURE_NOISE: f64 = 0.1;

impl CipherFamily {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet == 0 {
            return Err(Error::Config("task.alphabet must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "task length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "task.noise must lie in [0, 0.5), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Token vocabulary size including the special tokens.
    pub fn vocab(&self) -> usize {
        self.alphabet + FIRST_SYMBOL
    }

    /// Target with each symbol resampled with probability `noise_rate`.
    pub fn transcribe(&self, task: &CipherTask, source: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
        task.apply(source)
            .into_iter()
            .map(|t| {
                if self.noise_rate > 0.0 && rng.gen::<f64>() < self.noise_rate {
                    rng.gen_range(0..self.alphabet)
                } else {
                    t
                }
            })
            .collect()
    }

    fn signatures(&self, bins: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
        (0..self.alphabet)
            .map(|_| (0..bins).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect()
    }

    /// Synthetic `[len × bins]` feature map: the symbol's signature plus noise.
    pub fn render(&self, source: &[usize], bins: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let sig = self.signatures(bins);
        let data = source
            .iter()
            .flat_map(|&s| sig[s].clone())
            .map(|v| v + FEATURE_NOISE * rng.gen_range(-1.0..=1.0))
            .collect();
        Tensor::new(vec![source.len(), bins], data).expect("feature map shape")
    }
}

impl TaskFamily for CipherFamily {
    type Task = CipherTask;
    type Batch = SequenceBatch;

    fn sample_task_with(&self, rng: &mut ChaCha8Rng, _index: u64) -> CipherTask {
        let mut cipher: Vec<usize> = (0..self.alphabet).collect();
        cipher.shuffle(rng);
        CipherTask { cipher }
    }

    fn sample_batch(&self, task: &CipherTask, k: usize, rng: &mut ChaCha8Rng) -> Result<SequenceBatch> {
        self.validate()?;
        let to_tokens = |s: &[usize]| s.iter().map(|&x| symbol_to_token(x)).collect::<Vec<_>>();
        match self.feature_bins {
            None => {
                let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
                    .map(|_| {
                        let len = rng.gen_range(self.min_len..=self.max_len);
                        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.alphabet)).collect();
                        let tgt = self.transcribe(task, &src, rng);
                        (to_tokens(&src), to_tokens(&tgt))
                    })
                    .collect();
                SequenceBatch::from_pairs(&pairs)
            }
            Some(bins) => {
                // feature maps in one batch share a length
                let len = rng.gen_range(self.min_len..=self.max_len);
                let mut maps = Vec::with_capacity(k);
                let mut targets = Vec::with_capacity(k);
                for _ in 0..k {
                    let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.alphabet)).collect();
                    let tgt = self.transcribe(task, &src, rng);
                    maps.push(self.render(&src, bins, rng));
                    targets.push(to_tokens(&tgt));
                }
                SequenceBatch::from_features(maps, &targets)
            }
        }
    }
}
