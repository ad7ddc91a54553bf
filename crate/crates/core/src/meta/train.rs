use std::time::Instant;

use super::adapt::InnerConfig;
use super::optim::{Optimizer, OptimizerKind};
use super::outer::{outer_grad, Mode};
use super::schedule::WeightSchedule;
use crate::error::{Error, Result};
use crate::learner::{check_finite, loss_and_grad, Learner};
use crate::metrics::RunRecord;
use crate::params::ParamSet;
use crate::tasks::{mix, Episode, EpisodeBytes, StreamDigest, TaskFamily, TaskSampler};

#[derive(Debug, Clone, PartialEq)]
pub struct OuterConfig {
    pub meta_lr: f64,
    pub meta_batch_size: usize,
    pub n_outer_iters: usize,
    pub optimizer: OptimizerKind,
    pub mode: Mode,
    /// Store measured wall time in each record; when false the field is 0
    /// so that repeated runs produce identical records.
    pub record_wall_time: bool,
    /// Adapt the episodes of a meta-batch on the current rayon pool.
    pub parallel: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            meta_lr: 1e-3,
            meta_batch_size: 4,
            n_outer_iters: 1000,
            optimizer: OptimizerKind::default(),
            mode: Mode::Msl,
            record_wall_time: false,
            parallel: false,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch_size == 0 {
            return Err(Error::Config("outer.meta_batch_size must be at least 1".into()));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config(format!(
                "outer.meta_lr must be non-negative, got {}",
                self.meta_lr
            )));
        }
        Ok(())
    }
}

/// The ordered episode stream meta-training consumes.
pub trait EpisodeSource: Sync {
    type Batch: EpisodeBytes + Send + Sync;

    fn episode(&self, iter: usize, slot: usize) -> Result<Episode<Self::Batch>>;
}

impl<F: TaskFamily> EpisodeSource for TaskSampler<F> {
    type Batch = F::Batch;

    fn episode(&self, iter: usize, slot: usize) -> Result<Episode<F::Batch>> {
        self.stream_episode(iter, slot)
    }
}

/// Result of [`meta_train`]. On divergence `error` is set and `params`
/// and `records` hold the state before the failing iteration.
#[derive(Debug, Clone)]
pub struct MetaRun {
    pub params: ParamSet,
    pub records: Vec<RunRecord>,
    /// SHA-256 over every episode consumed, in order.
    pub stream_digest: String,
    pub error: Option<Error>,
}

/// Runs `outer.n_outer_iters` meta-updates starting from `init`.
/// `observer` sees every record as soon as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn meta_train<L, S>(
    learner: &L,
    init: &ParamSet,
    source: &S,
    inner: &InnerConfig,
    outer: &OuterConfig,
    schedule: &WeightSchedule,
    seed: u64,
    mut observer: impl FnMut(&RunRecord),
) -> Result<MetaRun>
where
    L: Learner,
    L::Batch: EpisodeBytes,
    S: EpisodeSource<Batch = L::Batch>,
{
    inner.validate()?;
    outer.validate()?;
    if schedule.n_steps() != inner.n_target_losses() {
        return Err(Error::Config(format!(
            "schedule has {} steps but the inner loop yields {} target losses",
            schedule.n_steps(),
            inner.n_target_losses()
        )));
    }
    let mut params = init.clone();
    let mut opt = Optimizer::new(outer.optimizer, outer.meta_lr)?;
    let mut digest = StreamDigest::default();
    let mut records = Vec::with_capacity(outer.n_outer_iters);
    for t in 0..outer.n_outer_iters {
        let start = Instant::now();
        let episodes = (0..outer.meta_batch_size)
            .map(|slot| source.episode(t, slot))
            .collect::<Result<Vec<_>>>()?;
        for ep in &episodes {
            digest.update(ep);
        }
        let scheduled = schedule.weights_at(t);
        let step = outer_grad(
            learner,
            &params,
            &episodes,
            inner,
            &scheduled,
            outer.mode,
            mix(seed, t as u64),
            outer.parallel,
        );
        let og = match step {
            Ok(og) => og,
            Err(e @ Error::Divergence { .. }) => {
                return Ok(MetaRun {
                    params,
                    records,
                    stream_digest: digest.hex(),
                    error: Some(e),
                })
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut params, &og.grad)?;
        let record = RunRecord {
            outer_iter: t,
            outer_loss: og.outer_loss,
            per_step_losses: og.step_losses,
            weights: og.weights,
            wall_ms: if outer.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        observer(&record);
        records.push(record);
    }
    Ok(MetaRun {
        params,
        records,
        stream_digest: digest.hex(),
        error: None,
    })
}

/// Plain supervised SGD: `epochs` passes over `batches` in order.
/// Zero epochs returns the parameters unchanged.
pub fn fine_tune<L: Learner>(
    learner: &L,
    params: &ParamSet,
    batches: &[L::Batch],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamSet> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("fine-tune lr must be non-negative, got {lr}")));
    }
    let mut p = params.clone();
    let mut step = 0;
    for _ in 0..epochs {
        for b in batches {
            let (loss, g) = loss_and_grad(learner, &p, b, true, mix(seed, step as u64))?;
            check_finite(loss, step)?;
            p = p.sgd_step(&g, lr)?;
            step += 1;
        }
    }
    Ok(p)
}
