//! Synthetic task families and deterministic episode sampling.
//!
//! Every random quantity is a pure function of a seed: tasks of
//! `(master seed, task index)`, episodes of `(task, sizes, episode seed)`.

mod cipher;
mod dump;
mod numeric;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use cipher::{CipherFamily, CipherTask};
pub use dump::{dump_episodes, load_episodes};
pub use numeric::{QuadraticFamily, QuadraticTask, SinusoidFamily, SinusoidTask};

use crate::error::{Error, Result};
use crate::model::{RegressionBatch, ScalarBatch, SequenceBatch, Source};

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, index))
}

/// One task's adaptation split and evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<B> {
    pub support: B,
    pub target: B,
    pub task_id: u64,
}

/// Stable byte serialization of a batch, used for stream fingerprints.
pub trait EpisodeBytes {
    fn write_bytes(&self, out: &mut Vec<u8>);
}

impl EpisodeBytes for ScalarBatch {
    fn write_bytes(&self, out: &mut Vec<u8>) {
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl EpisodeBytes for RegressionBatch {
    fn write_bytes(&self, out: &mut Vec<u8>) {
        for (x, y) in self.x.iter().zip(&self.y) {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
}

fn write_ids(rows: &[Vec<usize>], out: &mut Vec<u8>) {
    for r in rows {
        out.extend_from_slice(&(r.len() as u64).to_le_bytes());
        for &t in r {
            out.extend_from_slice(&(t as u64).to_le_bytes());
        }
    }
}

impl EpisodeBytes for SequenceBatch {
    fn write_bytes(&self, out: &mut Vec<u8>) {
        match &self.src {
            Source::Tokens(rows) => write_ids(rows, out),
            Source::Features(maps) => {
                for m in maps {
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        write_ids(&self.tgt_in, out);
        write_ids(&self.tgt_out, out);
    }
}

impl<B: EpisodeBytes> Episode<B> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.task_id.to_le_bytes().to_vec();
        self.support.write_bytes(&mut out);
        self.target.write_bytes(&mut out);
        out
    }
}

/// Running SHA-256 over a sequence of episodes.
#[derive(Debug, Clone, Default)]
pub struct StreamDigest {
    hasher: Sha256,
}

impl StreamDigest {
    pub fn update<B: EpisodeBytes>(&mut self, ep: &Episode<B>) {
        self.hasher.update(ep.to_bytes());
    }

    pub fn hex(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A parametric family of tasks.
pub trait TaskFamily: Sync {
    type Task: Clone + Send + Sync;
    type Batch: EpisodeBytes + Clone + Send + Sync;

    fn sample_task_with(&self, rng: &mut ChaCha8Rng, index: u64) -> Self::Task;

    /// `k` independent examples of `task`.
    fn sample_batch(&self, task: &Self::Task, k: usize, rng: &mut ChaCha8Rng) -> Result<Self::Batch>;
}

/// Support and target drawn independently from one seeded stream.
pub fn sample_episode<F: TaskFamily>(
    family: &F,
    task: &F::Task,
    task_id: u64,
    k_support: usize,
    k_target: usize,
    episode_seed: u64,
) -> Result<Episode<F::Batch>> {
    if k_support == 0 || k_target == 0 {
        return Err(Error::Contract("support and target sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let support = family.sample_batch(task, k_support, &mut rng)?;
    let target = family.sample_batch(task, k_target, &mut rng)?;
    Ok(Episode {
        support,
        target,
        task_id,
    })
}

/// Which task indices the meta-training stream draws from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskPool {
    /// A new task for every episode.
    Fresh,
    /// A fixed set of task indices, chosen uniformly per episode.
    Fixed(Vec<u64>),
}

/// Seeded source of tasks and episodes.
#[derive(Debug, Clone)]
pub struct TaskSampler<F> {
    pub family: F,
    pub master_seed: u64,
    pub k_support: usize,
    pub k_target: usize,
    pub pool: TaskPool,
}

impl<F: TaskFamily> TaskSampler<F> {
    pub fn new(family: F, master_seed: u64, k_support: usize, k_target: usize) -> Self {
        Self {
            family,
            master_seed,
            k_support,
            k_target,
            pool: TaskPool::Fresh,
        }
    }

    pub fn with_pool(mut self, pool: TaskPool) -> Self {
        self.pool = pool;
        self
    }

    /// Deterministic in `(master_seed, task_index)`.
    pub fn sample_task(&self, task_index: u64) -> F::Task {
        let mut rng = rng_for(self.master_seed, task_index);
        self.family.sample_task_with(&mut rng, task_index)
    }

    /// Episode of a given task with the sampler's sizes.
    pub fn episode_of(&self, task_index: u64, episode_seed: u64) -> Result<Episode<F::Batch>> {
        let task = self.sample_task(task_index);
        sample_episode(
            &self.family,
            &task,
            task_index,
            self.k_support,
            self.k_target,
            episode_seed,
        )
    }

    /// Episode for slot `slot` of meta-iteration `iter`.
    pub fn stream_episode(&self, iter: usize, slot: usize) -> Result<Episode<F::Batch>> {
        let key = mix(mix(self.master_seed ^ 0xE915_0DE5, iter as u64), slot as u64);
        let task_index = match &self.pool {
            TaskPool::Fresh => key,
            TaskPool::Fixed(ids) => {
                if ids.is_empty() {
                    return Err(Error::Config("empty task pool".into()));
                }
                ids[(mix(key, 1) % ids.len() as u64) as usize]
            }
        };
        self.episode_of(task_index, mix(key, 2))
    }
}
