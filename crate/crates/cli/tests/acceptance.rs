//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msl_cli::compare::{run_compare, ComparisonReport};
use msl_cli::config::ExperimentConfig;
use msl_core::learner::{eval_loss, loss_and_grad};
use msl_core::meta::{outer_grad, InnerConfig, Mode, WeightSchedule};
use msl_core::metrics::cer;
use msl_core::model::{
    beam_search, greedy_search, Hypothesis, ModelConfig, ModelScorer, Quadratic, Seq2Seq, SequenceBatch, Source,
    StepScorer, BOS,
};
use msl_core::tasks::{CipherFamily, QuadraticFamily, TaskSampler};
use msl_core::tensor::finite_diff_entries;
use msl_core::{ParamSet, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

/// `configs/desk.cfg`, or the file named by `MSL_ACCEPTANCE_CONFIG`.
fn desk_config() -> ExperimentConfig {
    let path = std::env::var_os("MSL_ACCEPTANCE_CONFIG")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg"));
    ExperimentConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn desk_family(cfg: &ExperimentConfig) -> CipherFamily {
    cfg.cipher_family()
}

fn inner(n: usize, alpha: f64) -> InnerConfig {
    InnerConfig {
        n_steps: n,
        inner_lr: alpha,
        include_step_zero: false,
    }
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..n)
        .map(|_| {
            let seq = |rng: &mut ChaCha8Rng| {
                let len = rng.gen_range(1..=max_len);
                (0..len).map(|_| rng.gen_range(3..vocab)).collect::<Vec<_>>()
            };
            (seq(rng), seq(rng))
        })
        .collect()
}

// ---------- 1: gradients ----------

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let instances = 100;
    for inst in 0..instances {
        let vocab = rng.gen_range(5..12);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d_model = heads * rng.gen_range(2..5) * 2;
        let mut c = ModelConfig::desk(vocab, vocab);
        c.d_model = d_model;
        c.n_heads = heads;
        c.d_k = d_model / heads;
        c.d_v = d_model / heads;
        c.d_ff = 2 * d_model;
        c.n_encoder_layers = rng.gen_range(1..3);
        c.n_decoder_layers = rng.gen_range(1..3);
        c.max_len = 12;
        let m = Seq2Seq::new(c).map_err(|e| e.to_string())?;
        let p = m.init_params(inst);
        let n_pairs = rng.gen_range(1..4);
        let batch = SequenceBatch::from_pairs(&random_pairs(&mut rng, n_pairs, vocab, 6))
            .map_err(|e| e.to_string())?;
        let (_, grad) = loss_and_grad(&m, &p, &batch, false, 0).map_err(|e| e.to_string())?;
        let entries: Vec<(String, usize)> = p
            .iter()
            .flat_map(|(name, t)| {
                let n = t.numel();
                let picks: Vec<usize> = (0..3.min(n)).map(|_| rng.gen_range(0..n)).collect();
                picks.into_iter().map(move |i| (name.to_string(), i))
            })
            .collect();
        let fd = finite_diff_entries(|q| eval_loss(&m, q, &batch), &p, &entries, 1e-5).map_err(|e| e.to_string())?;
        for ((name, i), numeric) in entries.iter().zip(fd) {
            let analytic = grad.get(name).unwrap().data()[*i];
            let err = (analytic - numeric).abs();
            let allowed = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-7);
            worst = worst.max(err / allowed);
            if err > allowed {
                return Err(format!("instance {inst} {name}[{i}]: analytic {analytic} numeric {numeric}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{instances} models, {checked} coordinates, worst error/tolerance {worst:.3}"))
}

// ---------- 2 and 3: reductions on the transformer ----------

fn desk_model(cfg: &ExperimentConfig, dropout: f64) -> (Seq2Seq, TaskSampler<CipherFamily>) {
    let fam = desk_family(cfg);
    let mut mc = cfg.model_config().expect("model config");
    mc.dropout = dropout;
    let sampler = TaskSampler::new(fam, 7, cfg.task.k_support, cfg.task.k_target);
    (Seq2Seq::new(mc).expect("model"), sampler)
}

fn one_hot_reduction(cfg: &ExperimentConfig) -> Outcome {
    let (m, s) = desk_model(cfg, 0.1);
    let n = cfg.inner.n_steps;
    let mut one_hot = vec![0.0; n];
    one_hot[n - 1] = 1.0;
    let annealed = WeightSchedule::default_for(n, cfg.outer.n_outer_iters).unwrap().weights_at(0);
    for seed in 0..50u64 {
        let p = m.init_params(seed);
        let eps: Vec<_> = (0..2).map(|k| s.stream_episode(seed as usize, k).unwrap()).collect();
        let cfg_inner = inner(n, cfg.inner.alpha);
        let a = outer_grad(&m, &p, &eps, &cfg_inner, &one_hot, Mode::Msl, seed, false).map_err(|e| e.to_string())?;
        let b = outer_grad(&m, &p, &eps, &cfg_inner, &annealed, Mode::Maml, seed, false).map_err(|e| e.to_string())?;
        if !a.grad.bit_eq(&b.grad) || a.outer_loss.to_bits() != b.outer_loss.to_bits() {
            return Err(format!("seed {seed}: one-hot msl differs from maml"));
        }
    }
    Ok("50 seeds bit-identical".into())
}

fn zero_alpha_collapse(cfg: &ExperimentConfig) -> Outcome {
    let (m, s) = desk_model(cfg, 0.1);
    let n = cfg.inner.n_steps;
    let weights = WeightSchedule::default_for(n, cfg.outer.n_outer_iters).unwrap().weights_at(100);
    let p = m.init_params(3);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let ep = s.stream_episode(k, 0).unwrap();
        let og = outer_grad(&m, &p, std::slice::from_ref(&ep), &inner(n, 0.0), &weights, Mode::Msl, k as u64, false)
            .map_err(|e| e.to_string())?;
        let plain = eval_loss(&m, &p, &ep.target).map_err(|e| e.to_string())?;
        worst = worst.max((og.outer_loss - plain).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("50 episodes, max |combined - unadapted| = {worst:e}"))
    } else {
        Err(format!("max difference {worst:e}"))
    }
}

// ---------- 4: closed form ----------

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// First-order meta-gradient of `mean_j (θ − y_j)²`. After `i` SGD steps on
/// the support set `θ_i = s̄ + (1 − 2α)^i (θ_0 − s̄)`; the target gradient at
/// `θ_i` is `2(θ_i − t̄)`.
fn quadratic_meta_grad(theta0: f64, episodes: &[(Vec<f64>, Vec<f64>)], alpha: f64, w: &[f64]) -> f64 {
    let per: Vec<f64> = episodes
        .iter()
        .map(|(s, t)| {
            let (sm, tm) = (mean(s), mean(t));
            w.iter()
                .enumerate()
                .map(|(k, wk)| wk * 2.0 * (sm + (1.0 - 2.0 * alpha).powi(k as i32 + 1) * (theta0 - sm) - tm))
                .sum()
        })
        .collect();
    mean(&per)
}

fn closed_form() -> Outcome {
    let mut worst = 0.0f64;
    for n in [1usize, 2, 5] {
        let sampler = TaskSampler::new(QuadraticFamily { noise: 0.5 }, n as u64, 6, 4);
        for it in 0..50 {
            let eps: Vec<_> = (0..4).map(|k| sampler.stream_episode(it, k).unwrap()).collect();
            let raw: Vec<_> = eps.iter().map(|e| (e.support.samples.clone(), e.target.samples.clone())).collect();
            let w = WeightSchedule::default_for(n, 60).unwrap().weights_at(it);
            let theta0 = 1.0 - 0.05 * it as f64;
            let mut p = ParamSet::new();
            p.insert("theta", Tensor::vector(vec![theta0])).unwrap();
            for mode in [Mode::Msl, Mode::Maml] {
                let og = outer_grad(&Quadratic::default(), &p, &eps, &inner(n, 0.15), &w, mode, 0, false)
                    .map_err(|e| e.to_string())?;
                let expect = quadratic_meta_grad(theta0, &raw, 0.15, &mode.effective_weights(&w));
                let got = og.grad.get("theta").unwrap().data()[0];
                worst = worst.max((got - expect).abs());
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("N in {{1,2,5}}, max error {worst:e}"))
    } else {
        Err(format!("max error {worst:e}"))
    }
}

// ---------- 5: schedule ----------

/// Checks `sched` at `samples` random iterations in `[0, horizon)`.
fn check_schedule(sched: &WeightSchedule, samples: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Outcome {
    let WeightSchedule::Annealed { n_steps: n, floor, .. } = *sched else {
        return Err("expected an annealed schedule".into());
    };
    let mut ts: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..horizon)).collect();
    ts.sort_unstable();
    let mut prev_last = f64::NEG_INFINITY;
    for &t in &ts {
        let w = sched.weights_at(t);
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("t {t}: weights sum to {sum}"));
        }
        if w[..n - 1].iter().any(|&x| x < floor) {
            return Err(format!("t {t}: a non-final weight is below {floor}"));
        }
        if w[n - 1] < prev_last {
            return Err(format!("t {t}: final weight decreased"));
        }
        prev_last = w[n - 1];
    }
    Ok(format!("{samples} iterations in [0, {horizon})"))
}

/// The default schedule for the configured run length, and the schedule the
/// config actually uses, each sampled past the point where it flattens.
fn schedule_properties(cfg: &ExperimentConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let total = cfg.outer.n_outer_iters;
    let default = WeightSchedule::default_for(cfg.inner.n_steps, total).unwrap();
    let configured = cfg.weight_schedule().map_err(|e| e.0)?;
    let horizon = match configured {
        WeightSchedule::Annealed { n_steps, decay, .. } if decay > 0.0 => (2.0 / (n_steps as f64 * decay)) as usize,
        _ => 2 * total,
    };
    let a = check_schedule(&default, 10_000, 2 * total, &mut rng)?;
    let b = check_schedule(&configured, 10_000, horizon.max(2 * total), &mut rng)?;
    Ok(format!("default: {a}; configured: {b}"))
}

// ---------- 6 and 7: desk comparison ----------

fn adaptation(r: &ComparisonReport) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = 0;
    for (run, base) in r.msl.runs.iter().zip(&r.baseline) {
        let a = &run.adaptation;
        let pass = a.post <= 0.7 * a.pre && a.post < base.post;
        ok += usize::from(pass);
        lines.push(format!(
            "seed {} pre {:.3} post {:.3} ({:.0}%) baseline post {:.3}",
            run.seed,
            a.pre,
            a.post,
            a.improvement_pct(),
            base.post
        ));
    }
    let msg = format!("{ok}/{} seeds; {}", r.msl.runs.len(), lines.join("; "));
    if ok == r.msl.runs.len() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn stability(r: &ComparisonReport) -> Outcome {
    let mut std_wins = 0;
    let mut spike_wins = 0;
    for (a, b) in r.maml.runs.iter().zip(&r.msl.runs) {
        std_wins += usize::from(b.stats.windowed_std < a.stats.windowed_std);
        spike_wins += usize::from(b.stats.max_spike < a.stats.max_spike);
    }
    let n = r.msl.runs.len();
    let med = |x: Option<usize>| x.map_or(usize::MAX, |v| v);
    let (maml_t, msl_t) = (r.maml.median_iters_to_threshold(), r.msl.median_iters_to_threshold());
    let msg = format!(
        "windowed_std lower in {std_wins}/{n} seeds, max_spike lower in {spike_wins}/{n}, \
         median iters_to_threshold msl {msl_t:?} maml {maml_t:?}"
    );
    if std_wins >= 4 && spike_wins >= 4 && med(msl_t) <= med(maml_t) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------- 8: CER and decoding ----------

fn edit_distance_table(r: &[u32], h: &[u32]) -> usize {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

/// Best-scoring complete path by enumerating every token sequence up to
/// `max_steps`; ties go to the smaller path, EOS included.
fn exhaustive<S: StepScorer>(s: &S, max_steps: usize) -> Result<(Vec<usize>, f64)> {
    let eos = s.eos();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((path, score)) = stack.pop() {
        let finished = path.last() == Some(&eos);
        if finished || path.len() == max_steps {
            let wins = best
                .as_ref()
                .is_none_or(|(bp, bs)| score > *bs || (score == *bs && path < *bp));
            if wins {
                best = Some((path, score));
            }
            continue;
        }
        let prefix: Vec<usize> = std::iter::once(BOS).chain(path.iter().copied()).collect();
        let row = s.next_log_probs(&[prefix])?.remove(0);
        for (tok, lp) in row.iter().enumerate() {
            let mut p = path.clone();
            p.push(tok);
            stack.push((p, score + lp));
        }
    }
    Ok(best.unwrap())
}

fn key(h: &Hypothesis, eos: usize) -> Vec<usize> {
    let mut k = h.tokens.clone();
    if h.finished {
        k.push(eos);
    }
    k
}

/// Random-initialized model with a sharpened output layer, so decodes vary
/// across seeds instead of collapsing to one token.
fn rigged_model(seed: u64, vocab: usize) -> (Seq2Seq, ParamSet) {
    let mut c = ModelConfig::desk(vocab, vocab);
    c.d_model = 8;
    c.n_heads = 2;
    c.d_k = 4;
    c.d_v = 4;
    c.d_ff = 16;
    c.max_len = 12;
    let m = Seq2Seq::new(c).unwrap();
    let mut p = m.init_params(seed);
    for v in p.get_mut("out.w").unwrap().data_mut() {
        *v *= 8.0;
    }
    (m, p)
}

fn cer_and_decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..1000 {
        let mut r: Vec<u32> = (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..4)).collect();
        if k % 10 == 0 {
            r.truncate(1);
        }
        let h: Vec<u32> = (0..rng.gen_range(0..=12)).map(|_| rng.gen_range(0..4)).collect();
        let expect = edit_distance_table(&r, &h) as f64 / r.len() as f64;
        let got = cer(&r, &h).map_err(|e| e.to_string())?;
        if got != expect {
            return Err(format!("pair {k}: cer {got} vs oracle {expect}"));
        }
    }

    let mut distinct = std::collections::BTreeSet::new();
    for seed in 0..100u64 {
        let (m, p) = rigged_model(seed, 9);
        let src = Source::Tokens(vec![(0..rng.gen_range(1..6)).map(|_| rng.gen_range(3..9)).collect()]);
        let g = m.greedy_decode(&p, &src, 8).map_err(|e| e.to_string())?;
        let b = m.beam_decode(&p, &src, 1, 8).map_err(|e| e.to_string())?;
        if g != b {
            return Err(format!("model {seed}: beam 1 {b:?} vs greedy {g:?}"));
        }
        distinct.insert(g);
    }

    let mut instances = 0;
    for seed in 0..60u64 {
        let vocab = 3 + (seed % 2) as usize;
        let (m, p) = rigged_model(seed, vocab);
        let src = Source::Tokens(vec![vec![vocab - 1; 1 + (seed % 3) as usize]]);
        let scorer = ModelScorer::new(&m, &p, &src).map_err(|e| e.to_string())?;
        for steps in 1..=3 {
            let (path, score) = exhaustive(&scorer, steps).map_err(|e| e.to_string())?;
            let width = vocab.pow(steps as u32);
            let h = beam_search(&scorer, width, steps).map_err(|e| e.to_string())?;
            if key(&h, scorer.eos()) != path || (h.log_prob - score).abs() > 1e-12 {
                return Err(format!("model {seed} steps {steps}: beam {h:?} vs exhaustive {path:?} {score}"));
            }
            let g = greedy_search(&scorer, steps).map_err(|e| e.to_string())?;
            if h.log_prob < g.log_prob {
                return Err(format!("model {seed} steps {steps}: beam below greedy"));
            }
            instances += 1;
        }
    }
    Ok(format!(
        "1000 pairs exact; beam 1 = greedy on 100 models ({} distinct outputs); exhaustive match on {instances} instances",
        distinct.len()
    ))
}

// ---------- 9: reproducibility ----------

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                dirs.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility(cfg: &ExperimentConfig) -> Outcome {
    let mut c = cfg.clone();
    c.outer.n_outer_iters = 60;
    c.finetune.epochs = 2;
    let seeds = [0, 1];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_compare(&c, &seeds, &a).map_err(|e| e.message().to_string())?;
    run_compare(&c, &seeds, &b).map_err(|e| e.message().to_string())?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    if !fa.keys().any(|p| p.ends_with("report.txt")) || !fa.keys().any(|p| p.to_string_lossy().ends_with(".metrics.jsonl")) {
        return Err("compare wrote no report or metrics".into());
    }
    if fa != fb {
        let diff: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
        return Err(format!("files differ: {diff:?}"));
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn report(id: usize, name: &str, started: Instant, outcome: &Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {id} {name}: PASS ({secs:.1}s) {detail}"),
        Err(detail) => println!("criterion {id} {name}: FAIL ({secs:.1}s) {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let cfg = desk_config();
    let mut all = true;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        all &= report(id, name, t, &o);
    };
    run(1, "gradient correctness", &mut gradient_check);
    run(2, "one-hot msl equals maml", &mut || one_hot_reduction(&cfg));
    run(3, "zero inner rate collapse", &mut || zero_alpha_collapse(&cfg));
    run(4, "closed-form meta-gradient", &mut closed_form);
    run(5, "schedule properties", &mut || schedule_properties(&cfg));

    let t = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let compared = run_compare(&cfg, &cfg.compare.seeds, tmp.path());
    println!("desk comparison finished in {:.0}s", t.elapsed().as_secs_f64());
    match &compared {
        Ok(r) => {
            run(6, "adaptation", &mut || adaptation(r));
            run(7, "stability", &mut || stability(r));
        }
        Err(e) => {
            for (id, name) in [(6, "adaptation"), (7, "stability")] {
                run(id, name, &mut || Err(format!("comparison failed: {}", e.message())));
            }
        }
    }

    run(8, "cer and decoding oracles", &mut cer_and_decoding);
    run(9, "reproducibility", &mut || reproducibility(&cfg));
    if !all {
        std::process::exit(1);
    }
}
