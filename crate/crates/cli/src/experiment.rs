//! Training and evaluation for every task family behind one interface.

use msl_core::meta::{fine_tune, meta_train, Mode};
use msl_core::metrics::{evaluate_model, Decode};
use msl_core::model::{Mlp, Quadratic, Seq2Seq};
use msl_core::tasks::{mix, EpisodeBytes, QuadraticFamily, SinusoidFamily, TaskFamily, TaskPool, TaskSampler};
use msl_core::{eval_loss, Error, Learner, ParamSet, RunRecord};

use crate::config::{ConfigError, ExperimentConfig, Family};

const FINETUNE_SALT: u64 = 0xF1E7_0E5A;
const EVAL_SALT: u64 = 0xE7A1_5A17;

/// Failure of a command, classified by exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// Bad configuration, arguments or input files (exit 2).
    Usage(String),
    /// Non-finite losses during training (exit 3).
    Divergence(String),
    /// Anything else (exit 1).
    Failure(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Divergence(_) => 3,
            RunError::Failure(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            RunError::Usage(m) | RunError::Divergence(m) | RunError::Failure(m) => m,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Usage(e.0)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => RunError::Divergence(e.to_string()),
            Error::Config(_) | Error::Format(_) => RunError::Usage(e.to_string()),
            other => RunError::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Failure(format!("io error: {e}"))
    }
}

/// A learner that can score itself on held-out batches.
pub trait Scored: Learner {
    /// Name of the score: `cer` for sequence models, `mse` otherwise.
    fn metric(&self) -> &'static str;

    fn score(&self, params: &ParamSet, batches: &[Self::Batch], decode: Decode) -> msl_core::Result<f64>;
}

fn mean_loss<L: Learner>(l: &L, params: &ParamSet, batches: &[L::Batch]) -> msl_core::Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += eval_loss(l, params, b)?;
    }
    Ok(total / batches.len() as f64)
}

impl Scored for Seq2Seq {
    fn metric(&self) -> &'static str {
        "cer"
    }

    fn score(&self, params: &ParamSet, batches: &[Self::Batch], decode: Decode) -> msl_core::Result<f64> {
        evaluate_model(self, params, batches, decode)
    }
}

impl Scored for Quadratic {
    fn metric(&self) -> &'static str {
        "mse"
    }

    fn score(&self, params: &ParamSet, batches: &[Self::Batch], _: Decode) -> msl_core::Result<f64> {
        mean_loss(self, params, batches)
    }
}

impl Scored for Mlp {
    fn metric(&self) -> &'static str {
        "mse"
    }

    fn score(&self, params: &ParamSet, batches: &[Self::Batch], _: Decode) -> msl_core::Result<f64> {
        mean_loss(self, params, batches)
    }
}

/// Learner and task family selected by `task.family`.
pub enum Setup {
    Quadratic(Quadratic, TaskSampler<QuadraticFamily>),
    Sinusoid(Mlp, TaskSampler<SinusoidFamily>),
    Cipher(Seq2Seq, TaskSampler<msl_core::tasks::CipherFamily>),
}

/// Runs `$body` with `$l` bound to the learner and `$s` to the sampler.
macro_rules! with_setup {
    ($setup:expr, |$l:ident, $s:ident| $body:expr) => {
        match $setup {
            Setup::Quadratic($l, $s) => $body,
            Setup::Sinusoid($l, $s) => $body,
            Setup::Cipher($l, $s) => $body,
        }
    };
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let t = &cfg.task;
        let pool = if t.n_source_tasks == 0 {
            TaskPool::Fresh
        } else {
            TaskPool::Fixed((0..t.n_source_tasks as u64).collect())
        };
        fn sampler<F: TaskFamily>(f: F, cfg: &ExperimentConfig, pool: &TaskPool) -> TaskSampler<F> {
            TaskSampler::new(f, cfg.seed, cfg.task.k_support, cfg.task.k_target).with_pool(pool.clone())
        }
        Ok(match t.family {
            Family::Quadratic => Setup::Quadratic(Quadratic::default(), sampler(QuadraticFamily { noise: t.noise }, cfg, &pool)),
            Family::Sinusoid => Setup::Sinusoid(
                Mlp {
                    hidden: cfg.model.mlp_hidden.clone(),
                },
                sampler(SinusoidFamily, cfg, &pool),
            ),
            Family::Cipher => Setup::Cipher(Seq2Seq::new(cfg.model_config()?)?, sampler(cfg.cipher_family(), cfg, &pool)),
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        with_setup!(self, |l, _s| l.init_params(seed))
    }

    pub fn metric(&self) -> &'static str {
        with_setup!(self, |l, _s| l.metric())
    }

    /// Fails when `params` does not fit this learner.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), RunError> {
        let reference = self.init_params(0);
        let fits = reference.len() == params.len()
            && reference
                .iter()
                .all(|(name, t)| params.get(name).is_some_and(|p| p.shape() == t.shape()));
        if fits {
            Ok(())
        } else {
            Err(RunError::Usage("checkpoint parameters do not match the configured model".into()))
        }
    }
}

/// Outcome of one meta-training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub records: Vec<RunRecord>,
    pub stream_digest: String,
    pub error: Option<Error>,
}

/// Worker threads for episode parallelism, from `MSL_THREADS` (default 1).
pub fn thread_count() -> Result<usize, RunError> {
    match std::env::var("MSL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| RunError::Usage(format!("MSL_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn train_with<L, F>(
    learner: &L,
    sampler: &TaskSampler<F>,
    cfg: &ExperimentConfig,
    mode: Mode,
    threads: usize,
    observer: &mut (dyn FnMut(&RunRecord) + Send),
) -> Result<TrainOutcome, RunError>
where
    L: Learner<Batch = F::Batch>,
    F: TaskFamily,
    F::Batch: EpisodeBytes,
{
    let mut outer = cfg.outer_config(threads > 1);
    outer.mode = mode;
    let init = learner.init_params(cfg.seed);
    let inner = cfg.inner_config();
    let schedule = cfg.weight_schedule()?;
    let mut run = || meta_train(learner, &init, sampler, &inner, &outer, &schedule, cfg.seed, &mut *observer);
    let result = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| RunError::Failure(e.to_string()))?
            .install(run)
    } else {
        run()
    }?;
    Ok(TrainOutcome {
        params: result.params,
        records: result.records,
        stream_digest: result.stream_digest,
        error: result.error,
    })
}

/// Meta-trains from `init_params(cfg.seed)` in `mode`.
pub fn train(
    setup: &Setup,
    cfg: &ExperimentConfig,
    mode: Mode,
    observer: &mut (dyn FnMut(&RunRecord) + Send),
) -> Result<TrainOutcome, RunError> {
    let threads = thread_count()?;
    with_setup!(setup, |l, s| train_with(l, s, cfg, mode, threads, observer))
}

/// Score of one held-out task before and after fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_id: u64,
    pub metric: &'static str,
    pub pre: f64,
    pub post: f64,
}

fn finetune_eval_with<L, F>(
    learner: &L,
    sampler: &TaskSampler<F>,
    cfg: &ExperimentConfig,
    params: &ParamSet,
    tasks: &[u64],
    epochs: usize,
    decode: Decode,
) -> Result<Vec<EvalRow>, RunError>
where
    L: Scored<Batch = F::Batch>,
    F: TaskFamily + Clone,
{
    let data = TaskSampler::new(sampler.family.clone(), cfg.seed, cfg.finetune.batch_size, cfg.eval.batch_size);
    let mut rows = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let adapt = (0..cfg.finetune.n_batches)
            .map(|b| Ok(data.episode_of(task, mix(FINETUNE_SALT, b as u64))?.support))
            .collect::<msl_core::Result<Vec<_>>>()?;
        let held_out = (0..cfg.eval.n_batches)
            .map(|b| Ok(data.episode_of(task, mix(EVAL_SALT, b as u64))?.target))
            .collect::<msl_core::Result<Vec<_>>>()?;
        let pre = learner.score(params, &held_out, decode)?;
        let tuned = fine_tune(learner, params, &adapt, epochs, cfg.finetune_lr(), mix(cfg.seed, task))?;
        let post = learner.score(&tuned, &held_out, decode)?;
        rows.push(EvalRow {
            task_id: task,
            metric: learner.metric(),
            pre,
            post,
        });
    }
    Ok(rows)
}

/// Fine-tunes `params` separately on each held-out task and scores the
/// task's evaluation split before and after.
pub fn finetune_eval(
    setup: &Setup,
    cfg: &ExperimentConfig,
    params: &ParamSet,
    tasks: &[u64],
    epochs: usize,
    decode: Decode,
) -> Result<Vec<EvalRow>, RunError> {
    setup.check_params(params)?;
    with_setup!(setup, |l, s| finetune_eval_with(l, s, cfg, params, tasks, epochs, decode))
}
