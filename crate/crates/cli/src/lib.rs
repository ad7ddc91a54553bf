//! Experiment runner: meta-training, fine-tuning evaluation, MAML/MSL
//! comparison and plot-data emission.
//!
//! Exit status: 0 on success, 2 for usage, config or input-file errors,
//! 3 when training diverges, 1 for anything else.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod records;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use msl_core::model::checkpoint::{read_checkpoint, write_checkpoint};

use crate::config::ExperimentConfig;
use crate::experiment::{finetune_eval, train, RunError, Setup};
use crate::records::{curve_text, read_metrics, MetricsWriter};

const SETTINGS_HELP: &str = "Settings: --config PATH, then any config key as --key value \
(for example --inner.alpha 0.05 or --outer.n-outer-iters 100). \
Shorthands: --seed, --out, --epochs (finetune.epochs), --decode (eval.decode), \
--task/--tasks (eval.tasks), --seeds (compare.seeds).";

#[derive(Parser, Debug)]
#[command(name = "msl", about = "Multi-step-loss meta-learning experiments", after_help = SETTINGS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train and write checkpoint.msl, metrics.jsonl and config.txt.
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
        settings: Vec<String>,
    },
    /// Fine-tune a checkpoint on held-out tasks; append rows to results.tsv.
    FinetuneEval {
        /// Parameters to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
        settings: Vec<String>,
    },
    /// Run MAML and MSL on identical episode streams and write report.txt.
    Compare {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
        settings: Vec<String>,
    },
    /// Write two-column curve data for a metrics file.
    EmitPlotData {
        metrics: PathBuf,
        /// Directory for the .dat files (default: next to the metrics file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn alias(key: &str) -> &str {
    match key {
        "epochs" => "finetune.epochs",
        "decode" => "eval.decode",
        "task" | "tasks" => "eval.tasks",
        "seeds" => "compare.seeds",
        other => other,
    }
}

/// Builds the configuration from `--config` and `--key value` settings,
/// applied in order after the file.
pub fn resolve_config(settings: &[String]) -> Result<ExperimentConfig, RunError> {
    let mut pairs = Vec::new();
    let mut config_path = None;
    let mut it = settings.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(RunError::Usage(format!("unexpected argument {arg:?}, settings take the form --key value")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| RunError::Usage(format!("missing value for --{flag}")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    let mut cfg = match config_path {
        Some(p) => ExperimentConfig::from_file(&p)?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in pairs {
        cfg.set(alias(&key), &value)
            .map_err(|e| RunError::Usage(format!("--{key}: {e}")))?;
    }
    Ok(cfg)
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let setup = Setup::new(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.render())?;
    let mut writer = MetricsWriter::create(&cfg.out.join("metrics.jsonl"), cfg.outer.mode)?;
    let mut io_error = None;
    let outcome = train(&setup, cfg, cfg.outer.mode, &mut |r| {
        if let Err(e) = writer.write(r) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if let Some(e) = outcome.error {
        return Err(RunError::Divergence(format!(
            "{e}; {} iterations recorded",
            outcome.records.len()
        )));
    }
    let file = fs::File::create(cfg.out.join("checkpoint.msl"))?;
    write_checkpoint(std::io::BufWriter::new(file), &outcome.params)?;
    fs::write(cfg.out.join("stream.sha256"), format!("{}\n", outcome.stream_digest))?;
    Ok(())
}

fn cmd_finetune_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(), RunError> {
    let setup = Setup::new(cfg)?;
    let file = fs::File::open(checkpoint)
        .map_err(|e| RunError::Usage(format!("cannot open checkpoint {}: {e}", checkpoint.display())))?;
    let params = read_checkpoint(std::io::BufReader::new(file))
        .map_err(|e| RunError::Usage(format!("{}: {e}", checkpoint.display())))?;
    let rows = finetune_eval(&setup, cfg, &params, &cfg.eval.tasks, cfg.finetune.epochs, cfg.eval.decode)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("results.tsv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "task_id\tmetric\tpre\tpost")?;
    }
    for r in &rows {
        writeln!(f, "{}\t{}\t{}\t{}", r.task_id, r.metric, r.pre, r.post)?;
        println!("task {}: {} {} -> {}", r.task_id, r.metric, r.pre, r.post);
    }
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let report = compare::run_compare(cfg, &cfg.compare.seeds, &cfg.out)?;
    print!("{}", report.render(cfg));
    Ok(())
}

fn cmd_emit_plot_data(metrics: &Path, out: Option<&Path>) -> Result<(), RunError> {
    if !metrics.is_file() {
        return Err(RunError::Usage(format!("metrics file {} not found", metrics.display())));
    }
    let lines = read_metrics(metrics).map_err(RunError::Usage)?;
    if lines.is_empty() {
        return Err(RunError::Usage(format!("metrics file {} has no records", metrics.display())));
    }
    let dir = out.map_or_else(|| metrics.parent().unwrap_or(Path::new(".")).to_path_buf(), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    let name = metrics.file_name().and_then(|n| n.to_str()).unwrap_or("metrics");
    let stem = name.strip_suffix(".jsonl").unwrap_or(name);
    fs::write(dir.join(format!("{stem}.dat")), curve_text(lines.iter().map(|l| (l.iter, l.outer_loss))))?;
    let n_steps = lines.iter().map(|l| l.step_losses.len()).max().unwrap_or(0);
    for k in 0..n_steps {
        let points = lines
            .iter()
            .filter_map(|l| l.step_losses.get(k).map(|&v| (l.iter, v)));
        fs::write(dir.join(format!("{stem}.step{}.dat", k + 1)), curve_text(points))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train { settings } => cmd_train(&resolve_config(&settings)?),
        Command::FinetuneEval { checkpoint, settings } => cmd_finetune_eval(&resolve_config(&settings)?, &checkpoint),
        Command::Compare { settings } => cmd_compare(&resolve_config(&settings)?),
        Command::EmitPlotData { metrics, out } => cmd_emit_plot_data(&metrics, out.as_deref()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
