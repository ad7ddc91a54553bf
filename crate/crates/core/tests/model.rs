use msl_core::learner::{eval_loss, loss_and_grad};
use msl_core::model::decode::argmax;
use msl_core::model::{
    beam_search, greedy_search, plain_beam_search, positional_encoding, ConvConfig, ModelConfig, Seq2Seq,
    SequenceBatch, Source, StepScorer, BOS, EOS, PAD,
};
use msl_core::tensor::{finite_diff_entries, Tensor};
use msl_core::{Error, ParamSet, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(d: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        d_k: d / heads,
        d_v: d / heads,
        d_ff: 2 * d,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        dropout: 0.0,
        src_vocab: vocab,
        tgt_vocab: vocab,
        max_len: 16,
        conv: None,
    }
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..n)
        .map(|_| {
            let ls = rng.gen_range(1..=max_len);
            let lt = rng.gen_range(0..=max_len);
            (
                (0..ls).map(|_| rng.gen_range(3..vocab)).collect(),
                (0..lt).map(|_| rng.gen_range(3..vocab)).collect(),
            )
        })
        .collect()
}

// ---------- independent reference forward pass ----------

type Mat = Vec<Vec<f64>>;

fn param(p: &ParamSet, name: &str) -> Mat {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vector(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn linear(p: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let w = param(p, &format!("{prefix}.w"));
    let b = vector(p, &format!("{prefix}.b"));
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(p: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let g = vector(p, &format!("{prefix}.gain"));
    let b = vector(p, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// `allowed(i, j)`: may query `i` look at key `j`.
fn attention(p: &ParamSet, c: &ModelConfig, prefix: &str, xq: &Mat, xkv: &Mat, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let q = linear(p, &format!("{prefix}.q"), xq);
    let k = linear(p, &format!("{prefix}.k"), xkv);
    let v = linear(p, &format!("{prefix}.v"), xkv);
    let mut out = vec![vec![0.0; c.n_heads * c.d_v]; xq.len()];
    for h in 0..c.n_heads {
        for i in 0..xq.len() {
            let scores: Vec<Option<f64>> = (0..xkv.len())
                .map(|j| {
                    allowed(i, j).then(|| {
                        (0..c.d_k).map(|t| q[i][h * c.d_k + t] * k[j][h * c.d_k + t]).sum::<f64>()
                            / (c.d_k as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for t in 0..c.d_v {
                    out[i][h * c.d_v + t] += e / z * v[j][h * c.d_v + t];
                }
            }
        }
    }
    linear(p, &format!("{prefix}.o"), &out)
}

fn feed_forward(p: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let h: Mat = linear(p, &format!("{prefix}.ff1"), x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear(p, &format!("{prefix}.ff2"), &h)
}

fn embed(p: &ParamSet, table: &str, ids: &[usize], d: usize) -> Mat {
    let t = param(p, table);
    let pe = positional_encoding(ids.len(), d);
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|j| t[id][j] * (d as f64).sqrt() + pe.data()[pos * d + j])
                .collect()
        })
        .collect()
}

/// Logits `[T × V]` for one unpadded example.
fn reference_logits(p: &ParamSet, c: &ModelConfig, src: &[usize], tgt_in: &[usize]) -> Mat {
    let mut x = embed(p, "src.embed", src, c.d_model);
    for l in 0..c.n_encoder_layers {
        let a = attention(p, c, &format!("enc.{l}.self"), &x, &x, |_, _| true);
        x = layer_norm(p, &format!("enc.{l}.ln1"), &add(&x, &a));
        let f = feed_forward(p, &format!("enc.{l}"), &x);
        x = layer_norm(p, &format!("enc.{l}.ln2"), &add(&x, &f));
    }
    let memory = x;
    let mut y = embed(p, "tgt.embed", tgt_in, c.d_model);
    for l in 0..c.n_decoder_layers {
        let a = attention(p, c, &format!("dec.{l}.self"), &y, &y, |i, j| j <= i);
        y = layer_norm(p, &format!("dec.{l}.ln1"), &add(&y, &a));
        let a = attention(p, c, &format!("dec.{l}.cross"), &y, &memory, |_, _| true);
        y = layer_norm(p, &format!("dec.{l}.ln2"), &add(&y, &a));
        let f = feed_forward(p, &format!("dec.{l}"), &y);
        y = layer_norm(p, &format!("dec.{l}.ln3"), &add(&y, &f));
    }
    linear(p, "out", &y)
}

fn logits_at(t: &Tensor, b: usize, pos: usize) -> &[f64] {
    let (tl, v) = (t.shape()[1], t.shape()[2]);
    &t.data()[(b * tl + pos) * v..(b * tl + pos + 1) * v]
}

#[test]
fn forward_matches_reference_on_hand_sized_model() {
    // d_model 4, one head, length-2 sequences
    let c = small_config(4, 1, 6);
    let m = Seq2Seq::new(c.clone()).unwrap();
    let p = m.init_params(17);
    let batch = SequenceBatch::from_pairs(&[(vec![3, 4], vec![5])]).unwrap();
    let got = m.forward_logits(&p, &batch, false).unwrap();
    let want = reference_logits(&p, &c, &[3, 4], &[BOS, 5]);
    for pos in 0..2 {
        for (a, b) in logits_at(&got, 0, pos).iter().zip(&want[pos]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn padded_batches_match_reference_per_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let heads = [1, 2, 4][seed % 3];
        let mut c = small_config(8, heads, 9);
        c.n_encoder_layers = 1 + seed % 2;
        c.n_decoder_layers = 2 - seed % 2;
        let m = Seq2Seq::new(c.clone()).unwrap();
        let p = m.init_params(seed as u64);
        let pairs = random_pairs(&mut rng, 3, 9, 6);
        let batch = SequenceBatch::from_pairs(&pairs).unwrap();
        let got = m.forward_logits(&p, &batch, false).unwrap();
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            let tgt_in: Vec<usize> = std::iter::once(BOS).chain(tgt.iter().copied()).collect();
            let want = reference_logits(&p, &c, src, &tgt_in);
            for (pos, row) in want.iter().enumerate() {
                for (a, w) in logits_at(&got, b, pos).iter().zip(row) {
                    assert!((a - w).abs() < 1e-11, "seed {seed} b {b} pos {pos}: {a} vs {w}");
                }
            }
        }
    }
}

#[test]
fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
    let mut c = small_config(64, 4, 10);
    c.d_ff = 64;
    let m = Seq2Seq::new(c).unwrap();
    let a = m.init_params(3);
    assert!(a.bit_eq(&m.init_params(3)));
    assert!(!a.bit_eq(&m.init_params(4)));
    for (name, t) in a.iter() {
        if name.ends_with(".b") || name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    // every projection from d_model has fan_in 64
    for name in ["enc.0.self.q.w", "dec.0.cross.v.w", "enc.0.ff1.w", "dec.0.ff2.w", "out.w"] {
        let t = a.get(name).unwrap();
        assert_eq!(t.shape()[0], 64, "{name}");
        assert!(t.data().iter().all(|v| v.abs() <= 0.125), "{name}");
    }
}

#[test]
fn decoder_is_causal() {
    let c = small_config(8, 2, 12);
    let m = Seq2Seq::new(c).unwrap();
    let p = m.init_params(1);
    let base = SequenceBatch::from_pairs(&[(vec![3, 4, 5, 6], vec![7, 8, 9, 10, 11])]).unwrap();
    let before = m.forward_logits(&p, &base, false).unwrap();
    let t_len = base.tgt_len();
    for t in 1..t_len {
        let mut changed = base.clone();
        changed.tgt_in[0][t] = if changed.tgt_in[0][t] == 3 { 4 } else { 3 };
        let after = m.forward_logits(&p, &changed, false).unwrap();
        for pos in 0..t {
            assert_eq!(logits_at(&before, 0, pos), logits_at(&after, 0, pos), "t {t} pos {pos}");
        }
        assert_ne!(logits_at(&before, 0, t), logits_at(&after, 0, t));
    }
}

#[test]
fn eval_mode_is_deterministic_even_with_dropout() {
    let mut c = small_config(8, 2, 12);
    c.dropout = 0.3;
    let m = Seq2Seq::new(c).unwrap();
    let p = m.init_params(1);
    let batch = SequenceBatch::from_pairs(&[(vec![3, 4], vec![5, 6])]).unwrap();
    let a = m.forward_logits(&p, &batch, false).unwrap();
    let b = m.forward_logits(&p, &batch, false).unwrap();
    assert_eq!(a, b);
    // training mode draws dropout masks from the seeded stream
    let (la, _) = loss_and_grad(&m, &p, &batch, true, 1).unwrap();
    let (lb, _) = loss_and_grad(&m, &p, &batch, true, 1).unwrap();
    let (lc, _) = loss_and_grad(&m, &p, &batch, true, 2).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_ne!(la, lc);
}

#[test]
fn fresh_model_is_near_uniform() {
    let vocab = 23;
    let c = ModelConfig::desk(vocab, vocab);
    let m = Seq2Seq::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..5 {
        let p = m.init_params(seed);
        let batch = SequenceBatch::from_pairs(&random_pairs(&mut rng, 8, vocab, 10)).unwrap();
        let loss = eval_loss(&m, &p, &batch).unwrap();
        let lnv = (vocab as f64).ln();
        assert!((loss - lnv).abs() < 0.15 * lnv, "{loss} vs {lnv}");
    }
}

#[test]
fn rigged_output_bias_gives_zero_loss() {
    let c = small_config(8, 2, 7);
    let m = Seq2Seq::new(c).unwrap();
    let mut p = m.init_params(0);
    p.get_mut("out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("out.b").unwrap().data_mut()[EOS] = 100.0;
    // empty targets: the only label is EOS
    let batch = SequenceBatch::from_pairs(&[(vec![3, 4], vec![]), (vec![5], vec![])]).unwrap();
    let loss = eval_loss(&m, &p, &batch).unwrap();
    assert!((0.0..1e-30).contains(&loss), "{loss}");
}

#[test]
fn padding_does_not_change_the_loss() {
    let c = small_config(8, 2, 10);
    let m = Seq2Seq::new(c).unwrap();
    let p = m.init_params(2);
    let one = SequenceBatch::from_pairs(&[(vec![3, 4, 5], vec![6, 7])]).unwrap();
    let two = SequenceBatch::from_pairs(&[(vec![3, 4, 5], vec![6, 7]), (vec![3, 4, 5], vec![6, 7])]).unwrap();
    let a = eval_loss(&m, &p, &one).unwrap();
    let b = eval_loss(&m, &p, &two).unwrap();
    assert!((a - b).abs() < 1e-14);

    // a longer neighbour pads this example; its logits stay the same
    let padded = SequenceBatch::from_pairs(&[(vec![3, 4, 5], vec![6, 7]), (vec![8, 9, 3, 4, 5, 6], vec![6, 7, 8, 9])])
        .unwrap();
    let la = m.forward_logits(&p, &one, false).unwrap();
    let lb = m.forward_logits(&p, &padded, false).unwrap();
    for pos in 0..3 {
        for (x, y) in logits_at(&la, 0, pos).iter().zip(logits_at(&lb, 0, pos)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn bad_inputs_are_reported() {
    let c = small_config(8, 2, 10);
    let m = Seq2Seq::new(c).unwrap();
    let p = m.init_params(2);
    let oov = SequenceBatch::from_pairs(&[(vec![3, 10], vec![4])]).unwrap();
    assert!(matches!(m.forward_logits(&p, &oov, false), Err(Error::Label(_))));
    let long = SequenceBatch::from_pairs(&[(vec![3; 17], vec![4])]).unwrap();
    assert!(matches!(m.forward_logits(&p, &long, false), Err(Error::Dimension { .. })));
    let mut all_pad = SequenceBatch::from_pairs(&[(vec![3], vec![4])]).unwrap();
    all_pad.tgt_out = vec![vec![PAD, PAD]];
    assert!(matches!(eval_loss(&m, &p, &all_pad), Err(Error::DegenerateBatch(_))));
    let mut bad = c_with_heads(3);
    bad.d_k = 0;
    assert!(Seq2Seq::new(bad).is_err());
}

fn c_with_heads(h: usize) -> ModelConfig {
    let mut c = small_config(12, h, 10);
    c.d_k = 4;
    c.d_v = 4;
    c
}

#[test]
fn sequence_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..3u64 {
        let mut c = ModelConfig::desk(9, 9);
        c.max_len = 12;
        let m = Seq2Seq::new(c).unwrap();
        let p = m.init_params(seed);
        let batch = SequenceBatch::from_pairs(&random_pairs(&mut rng, 3, 9, 5)).unwrap();
        let (_, grad) = loss_and_grad(&m, &p, &batch, false, 0).unwrap();
        let entries: Vec<(String, usize)> = p
            .iter()
            .flat_map(|(name, t)| {
                let n = t.numel();
                (0..3).map(move |k| (name.to_string(), (k * 7919 + seed as usize) % n))
            })
            .collect();
        let fd = finite_diff_entries(|q| eval_loss(&m, q, &batch), &p, &entries, 1e-5).unwrap();
        for ((name, i), numeric) in entries.iter().zip(fd) {
            let analytic = grad.get(name).unwrap().data()[*i];
            let allowed = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-7);
            assert!((analytic - numeric).abs() <= allowed, "{name}[{i}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn conv_front_end_runs_and_differentiates() {
    let mut c = small_config(8, 2, 10);
    c.conv = Some(ConvConfig {
        n_layers: 2,
        channels: 3,
        n_freq: 5,
        kernel: 3,
    });
    let m = Seq2Seq::new(c).unwrap();
    let p = m.init_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let batch = SequenceBatch::from_features(maps, &[vec![3, 4], vec![5]]).unwrap();
    let (loss, grad) = loss_and_grad(&m, &p, &batch, false, 0).unwrap();
    assert!(loss.is_finite());
    let entries: Vec<(String, usize)> = ["conv.0.w", "conv.1.w", "conv.proj.w", "conv.0.b"]
        .iter()
        .flat_map(|n| (0..3).map(move |i| (n.to_string(), i)))
        .collect();
    let fd = finite_diff_entries(|q| eval_loss(&m, q, &batch), &p, &entries, 1e-5).unwrap();
    for ((name, i), numeric) in entries.iter().zip(fd) {
        let analytic = grad.get(name).unwrap().data()[*i];
        assert!((analytic - numeric).abs() <= (1e-4 * analytic.abs().max(numeric.abs())).max(1e-7));
    }
    // a token source is rejected by a conv model
    let tokens = SequenceBatch::from_pairs(&[(vec![3], vec![4])]).unwrap();
    assert!(m.forward_logits(&p, &tokens, false).is_err());
}

// ---------- decoding ----------

/// A decoder whose next token depends only on the previous one:
/// `next[prev]`. Embeddings dominate the positional signal and every
/// attention and feed-forward output is switched off, so each layer norm
/// sees (almost) a one-hot vector.
fn rigged_chain(next: &[(usize, usize)], vocab: usize) -> (Seq2Seq, ParamSet) {
    let c = small_config(vocab, 1, vocab);
    let m = Seq2Seq::new(c).unwrap();
    let mut p = m.init_params(0);
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    for n in names {
        if n.ends_with(".o.w") || n.ends_with("ff2.w") || n == "out.w" || n == "tgt.embed" {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }
    let embed = p.get_mut("tgt.embed").unwrap().data_mut();
    for t in 0..vocab {
        embed[t * vocab + t] = 100.0;
    }
    let out = p.get_mut("out.w").unwrap().data_mut();
    for &(from, to) in next {
        out[from * vocab + to] = 10.0;
    }
    (m, p)
}

fn one_source(ids: &[usize]) -> Source {
    Source::Tokens(vec![ids.to_vec()])
}

#[test]
fn greedy_follows_a_rigged_chain() {
    let (m, p) = rigged_chain(&[(BOS, 3), (3, 4), (4, 5), (5, EOS)], 8);
    let out = m.greedy_decode(&p, &one_source(&[6, 7]), 10).unwrap();
    assert_eq!(out, vec![vec![3, 4, 5]]);
    assert_eq!(out, m.greedy_decode(&p, &one_source(&[6, 7]), 10).unwrap());
    // the step budget truncates
    assert_eq!(m.greedy_decode(&p, &one_source(&[6]), 2).unwrap(), vec![vec![3, 4]]);
    assert!(m.greedy_decode(&p, &one_source(&[6]), 17).is_err());

    let (m, p) = rigged_chain(&[(BOS, EOS)], 8);
    assert_eq!(m.greedy_decode(&p, &one_source(&[6]), 10).unwrap(), vec![Vec::<usize>::new()]);
    let beams = m.beam_decode(&p, &one_source(&[6]), 3, 10).unwrap();
    assert_eq!(beams, vec![Vec::<usize>::new()]);
    assert!(matches!(m.beam_decode(&p, &one_source(&[6]), 0, 10), Err(Error::Contract(_))));
}

/// Log-probabilities drawn afresh for every prefix from a seeded hash.
struct TableScorer {
    vocab: usize,
    seed: u64,
    sharpness: f64,
}

impl TableScorer {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1442695040888963407);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let z: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.gen_range(-1.0..1.0)).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }
}

impl StepScorer for TableScorer {
    fn eos(&self) -> usize {
        0
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Every sequence the decoder can produce within `max_steps`, scored.
fn exhaustive_best(s: &TableScorer, max_steps: usize) -> (Vec<usize>, f64, bool) {
    fn walk(s: &TableScorer, path: &mut Vec<usize>, score: f64, left: usize, best: &mut Option<(Vec<usize>, f64, bool)>) {
        let consider = |key: Vec<usize>, score: f64, finished: bool, best: &mut Option<(Vec<usize>, f64, bool)>| {
            let better = match best {
                None => true,
                Some((bk, bs, bf)) => {
                    let mut bkey = bk.clone();
                    if *bf {
                        bkey.push(0);
                    }
                    score > *bs || (score == *bs && key < bkey)
                }
            };
            if better {
                let mut tokens = key;
                if finished {
                    tokens.pop();
                }
                *best = Some((tokens, score, finished));
            }
        };
        if left == 0 {
            consider(path.clone(), score, false, best);
            return;
        }
        let prefix: Vec<usize> = std::iter::once(BOS).chain(path.iter().copied()).collect();
        let row = s.row(&prefix);
        for (tok, lp) in row.iter().enumerate() {
            if tok == 0 {
                let mut key = path.clone();
                key.push(0);
                consider(key, score + lp, true, best);
            } else {
                path.push(tok);
                walk(s, path, score + lp, left - 1, best);
                path.pop();
            }
        }
    }
    let mut best = None;
    walk(s, &mut Vec::new(), 0.0, max_steps, &mut best);
    best.unwrap()
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..300u64 {
        let vocab = 2 + (seed % 3) as usize;
        let steps = 1 + (seed % 3) as usize;
        let s = TableScorer {
            vocab,
            seed,
            sharpness: 2.0,
        };
        let (tokens, score, _) = exhaustive_best(&s, steps);
        let width = vocab.pow(steps as u32);
        for h in [plain_beam_search(&s, width, steps).unwrap(), beam_search(&s, width, steps).unwrap()] {
            assert_eq!(h.tokens, tokens, "seed {seed}");
            assert!((h.log_prob - score).abs() < 1e-12);
        }
    }
}

#[test]
fn beam_of_one_is_greedy_and_wider_beams_never_lose_to_greedy() {
    for seed in 0..200u64 {
        let s = TableScorer {
            vocab: 4,
            seed,
            sharpness: 3.0,
        };
        let g = greedy_search(&s, 5).unwrap();
        assert_eq!(beam_search(&s, 1, 5).unwrap(), g);
        for k in 2..5 {
            assert!(beam_search(&s, k, 5).unwrap().log_prob >= g.log_prob, "seed {seed} k {k}");
        }
    }
}

/// First step 0.6 / 0.4; the 0.6 branch continues with probability 0.5,
/// the 0.4 branch with probability 1.
struct ToyScorer;

impl StepScorer for ToyScorer {
    fn eos(&self) -> usize {
        0
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let ln = f64::ln;
        Ok(prefixes
            .iter()
            .map(|p| match &p[1..] {
                [] => vec![ln(1e-300), ln(0.6), ln(0.4)],
                [1] => vec![ln(0.5), ln(0.25), ln(0.25)],
                [2] => vec![ln(1e-300), ln(1e-300), ln(1.0)],
                [1, _] => vec![ln(1.0), ln(1e-300), ln(1e-300)],
                _ => vec![ln(1.0), ln(1e-300), ln(1e-300)],
            })
            .collect())
    }
}

#[test]
fn beam_recovers_the_branch_greedy_misses() {
    let g = greedy_search(&ToyScorer, 3).unwrap();
    assert_eq!(g.tokens, vec![1]);
    assert!((g.log_prob - (0.6f64 * 0.5).ln()).abs() < 1e-12);
    let b = beam_search(&ToyScorer, 2, 3).unwrap();
    assert_eq!(b.tokens, vec![2, 2]);
    assert!((b.log_prob - 0.4f64.ln()).abs() < 1e-12);
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0; 4]), 0);
}

#[test]
fn model_beam_of_one_equals_greedy() {
    let c = small_config(8, 2, 7);
    let m = Seq2Seq::new(c).unwrap();
    for seed in 0..10 {
        let p = m.init_params(seed);
        let src = one_source(&[3, 4, 5]);
        assert_eq!(m.beam_decode(&p, &src, 1, 8).unwrap(), m.greedy_decode(&p, &src, 8).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    use msl_core::model::checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
    let m = Seq2Seq::new(small_config(8, 2, 10)).unwrap();
    let p = m.init_params(9);
    let bytes = encode_checkpoint(&p);
    assert_eq!(&bytes[..8], b"MSLCKPT1");
    assert!(decode_checkpoint(&bytes).unwrap().bit_eq(&p));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &p).unwrap();
    assert!(read_checkpoint(buf.as_slice()).unwrap().bit_eq(&p));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(b"NOTACKPT"), Err(Error::Format(_))));
}
