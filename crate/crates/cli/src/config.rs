//! Flat dotted-key experiment configuration.
//!
//! A config file holds one `key = value` per line; `#` starts a comment.
//! Every key has a default, unknown keys are rejected, and command-line
//! overrides use the same keys (`--inner.alpha 0.05`, dashes allowed in
//! place of underscores).

use std::fmt;
use std::path::{Path, PathBuf};

use msl_core::meta::{InnerConfig, Mode, OptimizerKind, OuterConfig, WeightSchedule};
use msl_core::metrics::Decode;
use msl_core::model::{ConvConfig, ModelConfig};
use msl_core::tasks::CipherFamily;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<msl_core::Error> for ConfigError {
    fn from(e: msl_core::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Quadratic,
    Sinusoid,
    Cipher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Annealed,
    Fixed,
    LastOnly,
    Uniform,
}

/// A config value: parsed from and rendered back to its text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! named_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("expected one of {}", [$($name),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

named_value!(Family { "quadratic" => Family::Quadratic, "sinusoid" => Family::Sinusoid, "cipher" => Family::Cipher });
named_value!(OptimizerName { "adam" => OptimizerName::Adam, "sgd" => OptimizerName::Sgd });
named_value!(Mode { "maml" => Mode::Maml, "msl" => Mode::Msl });
named_value!(ScheduleKind {
    "annealed" => ScheduleKind::Annealed,
    "fixed" => ScheduleKind::Fixed,
    "last_only" => ScheduleKind::LastOnly,
    "uniform" => ScheduleKind::Uniform,
});

impl ConfigValue for Decode {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: msl_core::Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

/// `auto` stands for a value derived from other keys.
impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" || s == "none" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".to_string(), T::render)
    }
}

/// Comma-separated lists; empty text is an empty list.
impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub mlp_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSection {
    pub n_steps: usize,
    pub alpha: f64,
    pub include_step_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterSection {
    pub meta_lr: f64,
    pub meta_batch_size: usize,
    pub n_outer_iters: usize,
    pub optimizer: OptimizerName,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: Mode,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub decay: Option<f64>,
    pub floor: Option<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub family: Family,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub feature_bins: usize,
    pub k_support: usize,
    pub k_target: usize,
    pub n_source_tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: Option<f64>,
    pub n_batches: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub tasks: Vec<u64>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub decode: Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSection {
    pub seeds: Vec<u64>,
    pub window: usize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub inner: InnerSection,
    pub outer: OuterSection,
    pub schedule: ScheduleSection,
    pub task: TaskSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelSection {
                d_model: 32,
                n_heads: 4,
                d_k: 8,
                d_v: 8,
                d_ff: 64,
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                dropout: 0.0,
                max_len: 32,
                conv_layers: 2,
                conv_channels: 4,
                conv_kernel: 3,
                mlp_hidden: vec![40, 40],
            },
            inner: InnerSection {
                n_steps: 5,
                alpha: 0.01,
                include_step_zero: false,
            },
            outer: OuterSection {
                meta_lr: 1e-3,
                meta_batch_size: 4,
                n_outer_iters: 1000,
                optimizer: OptimizerName::Adam,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                mode: Mode::Msl,
                record_wall_time: false,
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::Annealed,
                decay: None,
                floor: None,
                weights: Vec::new(),
            },
            task: TaskSection {
                family: Family::Cipher,
                alphabet: 20,
                min_len: 5,
                max_len: 15,
                noise: 0.1,
                feature_bins: 0,
                k_support: 8,
                k_target: 8,
                n_source_tasks: 3,
            },
            finetune: FinetuneSection {
                epochs: 10,
                lr: None,
                n_batches: 4,
                batch_size: 8,
            },
            eval: EvalSection {
                tasks: vec![1000, 1001],
                n_batches: 2,
                batch_size: 10,
                decode: Decode::Beam(5),
            },
            compare: CompareSection {
                seeds: vec![0],
                window: 50,
                threshold: None,
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+, $doc:literal;)*) => {
        /// Every accepted key with a one-line description.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl ExperimentConfig {
            fn set_parsed(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse_value(value)?,)*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every key, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed, "master seed for tasks, initialization and episode order";
    "out" => out, "output directory";
    "model.d_model" => model.d_model, "transformer width";
    "model.n_heads" => model.n_heads, "attention heads";
    "model.d_k" => model.d_k, "per-head query/key width";
    "model.d_v" => model.d_v, "per-head value width";
    "model.d_ff" => model.d_ff, "feed-forward inner width";
    "model.n_encoder_layers" => model.n_encoder_layers, "encoder layers";
    "model.n_decoder_layers" => model.n_decoder_layers, "decoder layers";
    "model.dropout" => model.dropout, "dropout rate in training passes";
    "model.max_len" => model.max_len, "longest source or target sequence";
    "model.conv_layers" => model.conv_layers, "conv front-end layers (feature-map tasks)";
    "model.conv_channels" => model.conv_channels, "conv front-end channels";
    "model.conv_kernel" => model.conv_kernel, "conv kernel size (odd)";
    "model.mlp_hidden" => model.mlp_hidden, "hidden widths of the sinusoid regressor";
    "inner.n_steps" => inner.n_steps, "inner adaptation steps N";
    "inner.alpha" => inner.alpha, "inner SGD learning rate";
    "inner.include_step_zero" => inner.include_step_zero, "add the unadapted target loss as an extra term";
    "outer.meta_lr" => outer.meta_lr, "outer learning rate";
    "outer.meta_batch_size" => outer.meta_batch_size, "episodes per outer update";
    "outer.n_outer_iters" => outer.n_outer_iters, "outer updates";
    "outer.optimizer" => outer.optimizer, "adam or sgd";
    "outer.beta1" => outer.beta1, "Adam first-moment decay";
    "outer.beta2" => outer.beta2, "Adam second-moment decay";
    "outer.eps" => outer.eps, "Adam denominator offset";
    "outer.mode" => outer.mode, "maml or msl";
    "outer.record_wall_time" => outer.record_wall_time, "store measured wall time in metrics";
    "schedule.kind" => schedule.kind, "annealed, fixed, last_only or uniform";
    "schedule.decay" => schedule.decay, "per-iteration decay of early weights (auto: zero at 80% of training)";
    "schedule.floor" => schedule.floor, "lower bound of early weights (auto: 0.03/N)";
    "schedule.weights" => schedule.weights, "weights of a fixed schedule";
    "task.family" => task.family, "quadratic, sinusoid or cipher";
    "task.alphabet" => task.alphabet, "cipher alphabet size";
    "task.min_len" => task.min_len, "shortest cipher sequence";
    "task.max_len" => task.max_len, "longest cipher sequence";
    "task.noise" => task.noise, "cipher resampling rate, or quadratic sample spread";
    "task.feature_bins" => task.feature_bins, "render cipher sources as feature maps of this width (0: tokens)";
    "task.k_support" => task.k_support, "support examples per episode";
    "task.k_target" => task.k_target, "target examples per episode";
    "task.n_source_tasks" => task.n_source_tasks, "meta-training task pool size (0: a fresh task per episode)";
    "finetune.epochs" => finetune.epochs, "fine-tuning passes over the adaptation data";
    "finetune.lr" => finetune.lr, "fine-tuning SGD rate (auto: inner.alpha)";
    "finetune.n_batches" => finetune.n_batches, "adaptation batches per held-out task";
    "finetune.batch_size" => finetune.batch_size, "examples per adaptation batch";
    "eval.tasks" => eval.tasks, "held-out task indices";
    "eval.n_batches" => eval.n_batches, "evaluation batches per held-out task";
    "eval.batch_size" => eval.batch_size, "examples per evaluation batch";
    "eval.decode" => eval.decode, "greedy, beam or beam:K";
    "compare.seeds" => compare.seeds, "seeds run by compare";
    "compare.window" => compare.window, "window of the curve statistics";
    "compare.threshold" => compare.threshold, "loss threshold for iterations-to-threshold (none: skip)";
}

/// Canonical form of a key given on the command line.
pub fn normalize_key(key: &str) -> String {
    key.replace('-', "_")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = normalize_key(key);
        self.set_parsed(&key, value.trim()).map_err(|e| {
            if e.starts_with("unknown key") {
                ConfigError(e)
            } else {
                ConfigError(format!("bad value {value:?} for {key}: {e}"))
            }
        })
    }

    /// Applies a config file's text; `origin` names it in diagnostics.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// The resolved configuration in config-file syntax.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let vocab = self.cipher_family().vocab();
        let m = &self.model;
        let cfg = ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_k: m.d_k,
            d_v: m.d_v,
            d_ff: m.d_ff,
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            dropout: m.dropout,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len: m.max_len,
            conv: (self.task.feature_bins > 0).then_some(ConvConfig {
                n_layers: m.conv_layers,
                channels: m.conv_channels,
                n_freq: self.task.feature_bins,
                kernel: m.conv_kernel,
            }),
        };
        cfg.validate()?;
        // targets gain a BOS/EOS position
        if self.task.max_len + 1 > m.max_len {
            return Err(ConfigError(format!(
                "model.max_len {} is too short for task.max_len {}",
                m.max_len, self.task.max_len
            )));
        }
        Ok(cfg)
    }

    pub fn cipher_family(&self) -> CipherFamily {
        CipherFamily {
            alphabet: self.task.alphabet,
            min_len: self.task.min_len,
            max_len: self.task.max_len,
            noise_rate: self.task.noise,
            feature_bins: (self.task.feature_bins > 0).then_some(self.task.feature_bins),
        }
    }

    pub fn inner_config(&self) -> InnerConfig {
        InnerConfig {
            n_steps: self.inner.n_steps,
            inner_lr: self.inner.alpha,
            include_step_zero: self.inner.include_step_zero,
        }
    }

    pub fn outer_config(&self, parallel: bool) -> OuterConfig {
        let o = &self.outer;
        OuterConfig {
            meta_lr: o.meta_lr,
            meta_batch_size: o.meta_batch_size,
            n_outer_iters: o.n_outer_iters,
            optimizer: match o.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                },
            },
            mode: o.mode,
            record_wall_time: o.record_wall_time,
            parallel,
        }
    }

    pub fn weight_schedule(&self) -> Result<WeightSchedule, ConfigError> {
        let n = self.inner_config().n_target_losses();
        let s = &self.schedule;
        let sched = match s.kind {
            ScheduleKind::Annealed => {
                let auto = WeightSchedule::default_for(n, self.outer.n_outer_iters)?;
                let WeightSchedule::Annealed { decay, floor, .. } = auto else {
                    unreachable!()
                };
                WeightSchedule::annealed(n, s.decay.unwrap_or(decay), s.floor.unwrap_or(floor))?
            }
            ScheduleKind::Fixed => WeightSchedule::fixed(s.weights.clone())?,
            ScheduleKind::LastOnly => WeightSchedule::last_only(n),
            ScheduleKind::Uniform => WeightSchedule::uniform(n),
        };
        if sched.n_steps() != n {
            return Err(ConfigError(format!(
                "schedule.weights has {} entries but the inner loop yields {n} target losses",
                sched.n_steps()
            )));
        }
        Ok(sched)
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune.lr.unwrap_or(self.inner.alpha)
    }

    /// Checks everything that does not depend on the task family's learner.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.inner_config().validate()?;
        self.outer_config(false).validate()?;
        self.weight_schedule()?;
        let t = &self.task;
        if t.k_support == 0 || t.k_target == 0 {
            return Err(ConfigError("task.k_support and task.k_target must be at least 1".into()));
        }
        if self.finetune.n_batches == 0 || self.finetune.batch_size == 0 {
            return Err(ConfigError("finetune.n_batches and finetune.batch_size must be at least 1".into()));
        }
        if self.eval.n_batches == 0 || self.eval.batch_size == 0 || self.eval.tasks.is_empty() {
            return Err(ConfigError("eval needs at least one task, batch and example".into()));
        }
        if let Some(lr) = self.finetune.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(ConfigError(format!("finetune.lr must be non-negative, got {lr}")));
            }
        }
        if self.compare.window < 2 {
            return Err(ConfigError("compare.window must be at least 2".into()));
        }
        match t.family {
            Family::Cipher => {
                self.cipher_family().validate()?;
                self.model_config()?;
            }
            Family::Quadratic => {
                if !(t.noise >= 0.0 && t.noise.is_finite()) {
                    return Err(ConfigError(format!("task.noise must be non-negative, got {}", t.noise)));
                }
            }
            Family::Sinusoid => {
                if self.model.mlp_hidden.contains(&0) {
                    return Err(ConfigError("model.mlp_hidden widths must be positive".into()));
                }
            }
        }
        Ok(())
    }
}
