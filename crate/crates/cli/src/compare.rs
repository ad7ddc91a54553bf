//! Paired MAML / MSL runs and the comparison report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use msl_core::meta::Mode;
use msl_core::metrics::{curve_stats, CurveStats};
use msl_core::RunRecord;

use crate::config::ExperimentConfig;
use crate::experiment::{finetune_eval, train, RunError, Setup};
use crate::records::{curve_text, MetricsWriter};

/// Fine-tuning scores averaged over the held-out tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub pre: f64,
    pub post: f64,
}

impl Adaptation {
    /// Relative reduction from `pre` to `post` in percent.
    pub fn improvement_pct(&self) -> f64 {
        relative_pct(self.pre, self.post)
    }
}

fn relative_pct(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        (from - to) / from * 100.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub stats: CurveStats,
    pub adaptation: Adaptation,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: Vec<SeedRun>,
}

impl ModeSummary {
    fn mean(&self, f: impl Fn(&SeedRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_windowed_std(&self) -> f64 {
        self.mean(|r| r.stats.windowed_std)
    }

    pub fn mean_max_spike(&self) -> f64 {
        self.mean(|r| r.stats.max_spike)
    }

    pub fn mean_post(&self) -> f64 {
        self.mean(|r| r.adaptation.post)
    }

    pub fn mean_pre(&self) -> f64 {
        self.mean(|r| r.adaptation.pre)
    }

    /// Lower median of iterations-to-threshold; a run that never reached
    /// the threshold counts as slower than any that did.
    pub fn median_iters_to_threshold(&self) -> Option<usize> {
        let mut v: Vec<Option<usize>> = self.runs.iter().map(|r| r.stats.iters_to_threshold).collect();
        v.sort_by_key(|x| x.unwrap_or(usize::MAX));
        v.get((v.len().max(1) - 1) / 2).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub metric: &'static str,
    /// Episode-stream digest per seed, shared by both modes.
    pub digests: Vec<String>,
    pub maml: ModeSummary,
    pub msl: ModeSummary,
    /// Never meta-trained initialization, fine-tuned identically.
    pub baseline: Vec<Adaptation>,
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |i| i.to_string())
}

impl ComparisonReport {
    pub fn mean_baseline_post(&self) -> f64 {
        self.baseline.iter().map(|a| a.post).sum::<f64>() / self.baseline.len() as f64
    }

    pub fn render(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::new();
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        writeln!(s, "# maml vs msl comparison").unwrap();
        writeln!(s, "seeds = {seeds}").unwrap();
        writeln!(s, "metric = {}", self.metric).unwrap();
        writeln!(s, "window = {}", cfg.compare.window).unwrap();
        writeln!(s, "threshold = {}", cfg.compare.threshold.map_or("none".into(), |t| t.to_string())).unwrap();
        writeln!(s, "outer_iters = {}", cfg.outer.n_outer_iters).unwrap();
        writeln!(s, "finetune_epochs = {}", cfg.finetune.epochs).unwrap();
        writeln!(s, "decode = {}", cfg.eval.decode).unwrap();
        writeln!(s, "\n[stream]").unwrap();
        for (seed, d) in self.seeds.iter().zip(&self.digests) {
            writeln!(s, "seed.{seed} = {d}").unwrap();
        }
        for m in [&self.maml, &self.msl] {
            writeln!(s, "\n[curve_stats {}]", m.mode.as_str()).unwrap();
            for r in &m.runs {
                let st = &r.stats;
                writeln!(s, "seed.{}.mean_abs_successive_diff = {}", r.seed, st.mean_abs_successive_diff).unwrap();
                writeln!(s, "seed.{}.windowed_std = {}", r.seed, st.windowed_std).unwrap();
                writeln!(s, "seed.{}.max_spike = {}", r.seed, st.max_spike).unwrap();
                writeln!(s, "seed.{}.auc = {}", r.seed, st.auc).unwrap();
                writeln!(s, "seed.{}.iters_to_threshold = {}", r.seed, opt(st.iters_to_threshold)).unwrap();
            }
            writeln!(s, "mean.mean_abs_successive_diff = {}", m.mean(|r| r.stats.mean_abs_successive_diff)).unwrap();
            writeln!(s, "mean.windowed_std = {}", m.mean_windowed_std()).unwrap();
            writeln!(s, "mean.max_spike = {}", m.mean_max_spike()).unwrap();
            writeln!(s, "mean.auc = {}", m.mean(|r| r.stats.auc)).unwrap();
            writeln!(s, "median.iters_to_threshold = {}", opt(m.median_iters_to_threshold())).unwrap();
        }
        let blocks = [
            ("maml", self.maml.runs.iter().map(|r| r.adaptation.clone()).collect::<Vec<_>>()),
            ("msl", self.msl.runs.iter().map(|r| r.adaptation.clone()).collect()),
            ("baseline", self.baseline.clone()),
        ];
        for (name, adapt) in &blocks {
            writeln!(s, "\n[finetune {name}]").unwrap();
            for (seed, a) in self.seeds.iter().zip(adapt) {
                writeln!(s, "seed.{seed}.pre = {}", a.pre).unwrap();
                writeln!(s, "seed.{seed}.post = {}", a.post).unwrap();
                writeln!(s, "seed.{seed}.improvement_pct = {}", a.improvement_pct()).unwrap();
            }
            let n = adapt.len() as f64;
            let mean = Adaptation {
                pre: adapt.iter().map(|a| a.pre).sum::<f64>() / n,
                post: adapt.iter().map(|a| a.post).sum::<f64>() / n,
            };
            writeln!(s, "mean.pre = {}", mean.pre).unwrap();
            writeln!(s, "mean.post = {}", mean.post).unwrap();
            writeln!(s, "mean.improvement_pct = {}", mean.improvement_pct()).unwrap();
        }
        writeln!(s, "\n[comparison]").unwrap();
        let pct = |a: f64, b: f64| relative_pct(a, b);
        writeln!(s, "msl_vs_maml.windowed_std_reduction_pct = {}", pct(self.maml.mean_windowed_std(), self.msl.mean_windowed_std())).unwrap();
        writeln!(s, "msl_vs_maml.max_spike_reduction_pct = {}", pct(self.maml.mean_max_spike(), self.msl.mean_max_spike())).unwrap();
        writeln!(s, "msl_vs_maml.post_reduction_pct = {}", pct(self.maml.mean_post(), self.msl.mean_post())).unwrap();
        writeln!(s, "msl_vs_baseline.post_reduction_pct = {}", pct(self.mean_baseline_post(), self.msl.mean_post())).unwrap();
        s
    }
}

fn mean_adaptation(rows: &[crate::experiment::EvalRow]) -> Adaptation {
    let n = rows.len() as f64;
    Adaptation {
        pre: rows.iter().map(|r| r.pre).sum::<f64>() / n,
        post: rows.iter().map(|r| r.post).sum::<f64>() / n,
    }
}

/// Runs both modes (and the un-meta-trained baseline) for every seed,
/// writing metrics, curve data and `report.txt` under `out`.
pub fn run_compare(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ComparisonReport, RunError> {
    if seeds.is_empty() {
        return Err(RunError::Usage("compare needs at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let mut maml = ModeSummary {
        mode: Mode::Maml,
        runs: Vec::new(),
    };
    let mut msl = ModeSummary {
        mode: Mode::Msl,
        runs: Vec::new(),
    };
    let mut digests = Vec::new();
    let mut baseline = Vec::new();
    let mut metric = "";
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let setup = Setup::new(&c)?;
        metric = setup.metric();
        let dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        let mut seed_digest = None;
        for summary in [&mut maml, &mut msl] {
            let mode = summary.mode;
            let mut writer = MetricsWriter::create(&dir.join(format!("{}.metrics.jsonl", mode.as_str())), mode)?;
            let mut io_error = None;
            let outcome = train(&setup, &c, mode, &mut |r| {
                if let Err(e) = writer.write(r) {
                    io_error.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_error {
                return Err(e.into());
            }
            if let Some(e) = outcome.error {
                return Err(RunError::Divergence(format!("seed {seed}, {} run: {e}", mode.as_str())));
            }
            let points = outcome.records.iter().map(|r| (r.outer_iter, r.outer_loss));
            fs::write(dir.join(format!("{}.curve.dat", mode.as_str())), curve_text(points))?;
            match &seed_digest {
                None => seed_digest = Some(outcome.stream_digest.clone()),
                Some(d) if *d != outcome.stream_digest => {
                    return Err(RunError::Failure(format!(
                        "seed {seed}: the two modes consumed different episode streams"
                    )))
                }
                Some(_) => {}
            }
            let stats = curve_stats(&outcome.records, c.compare.window, c.compare.threshold)
                .map_err(|e| RunError::Usage(format!("curve statistics: {e}")))?;
            let rows = finetune_eval(&setup, &c, &outcome.params, &c.eval.tasks, c.finetune.epochs, c.eval.decode)?;
            summary.runs.push(SeedRun {
                seed,
                stats,
                adaptation: mean_adaptation(&rows),
                records: outcome.records,
            });
        }
        digests.push(seed_digest.unwrap_or_default());
        let init = setup.init_params(seed);
        let rows = finetune_eval(&setup, &c, &init, &c.eval.tasks, c.finetune.epochs, c.eval.decode)?;
        baseline.push(mean_adaptation(&rows));
    }
    let report = ComparisonReport {
        seeds: seeds.to_vec(),
        metric,
        digests,
        maml,
        msl,
        baseline,
    };
    fs::write(out.join("report.txt"), report.render(cfg))?;
    fs::write(out.join("config.txt"), cfg.render())?;
    Ok(report)
}
