//! Teacher-forced encoder-decoder with multi-head attention.
//!
//! Post-norm residual blocks, fixed sinusoidal positions, causal masking in
//! decoder self-attention and key-padding masks wherever the source is
//! attended to. Activations are kept as `[batch*len × width]` matrices;
//! attention is computed per example and per head on row/column slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{SequenceBatch, Source, PAD};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::params::{Bound, ParamSet};
use crate::tensor::{AttentionShape, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Fixed sinusoidal position table `[len × d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positional table shape")
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let s = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-s..=s))
            .collect();
        self.params
            .insert(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
            .unwrap();
    }

    fn bias(&mut self, name: String, n: usize) {
        self.params.insert(name, Tensor::zeros(&[n])).unwrap();
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.w"), fan_in, fan_out);
        self.bias(format!("{prefix}.b"), fan_out);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.params
            .insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))
            .unwrap();
        self.bias(format!("{prefix}.bias"), d);
    }

    fn attention(&mut self, prefix: &str, c: &ModelConfig) {
        self.linear(&format!("{prefix}.q"), c.d_model, c.q_width());
        self.linear(&format!("{prefix}.k"), c.d_model, c.q_width());
        self.linear(&format!("{prefix}.v"), c.d_model, c.v_width());
        self.linear(&format!("{prefix}.o"), c.v_width(), c.d_model);
    }

    fn feed_forward(&mut self, prefix: &str, c: &ModelConfig) {
        self.linear(&format!("{prefix}.ff1"), c.d_model, c.d_ff);
        self.linear(&format!("{prefix}.ff2"), c.d_ff, c.d_model);
    }
}

/// Encoder output for a batch.
struct Encoded {
    memory: Var,
    batch: usize,
    len: usize,
    /// `[B][S]`, true where the source position is padding.
    key_pad: Vec<Vec<bool>>,
}

/// The sequence model. Stateless apart from its configuration; parameters
/// live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Scaled-uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases, unit
    /// layer-norm gains. Weight matrices are stored `[fan_in × fan_out]`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let c = &self.config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::new(),
        };
        match &c.conv {
            None => init.weight("src.embed".into(), c.src_vocab, c.d_model),
            Some(conv) => {
                let mut c_in = 1;
                for l in 0..conv.n_layers {
                    init.linear(&format!("conv.{l}"), conv.kernel * conv.kernel * c_in, conv.channels);
                    c_in = conv.channels;
                }
                init.linear("conv.proj", conv.n_freq * conv.channels, c.d_model);
            }
        }
        for l in 0..c.n_encoder_layers {
            let p = format!("enc.{l}");
            init.attention(&format!("{p}.self"), c);
            init.norm(&format!("{p}.ln1"), c.d_model);
            init.feed_forward(&p, c);
            init.norm(&format!("{p}.ln2"), c.d_model);
        }
        init.weight("tgt.embed".into(), c.tgt_vocab, c.d_model);
        for l in 0..c.n_decoder_layers {
            let p = format!("dec.{l}");
            init.attention(&format!("{p}.self"), c);
            init.norm(&format!("{p}.ln1"), c.d_model);
            init.attention(&format!("{p}.cross"), c);
            init.norm(&format!("{p}.ln2"), c.d_model);
            init.feed_forward(&p, c);
            init.norm(&format!("{p}.ln3"), c.d_model);
        }
        init.linear("out", c.d_model, c.tgt_vocab);
        init.params
    }

    fn linear(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{prefix}.w"))?;
        let b = p.get(&format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{prefix}.gain"))?;
        let bias = p.get(&format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn dropout(&self, g: &mut Graph, x: Var, train: bool) -> Result<Var> {
        if train && self.config.dropout > 0.0 {
            g.dropout(x, self.config.dropout)
        } else {
            Ok(x)
        }
    }

    /// Multi-head attention. `blocked[b]` is a row-major `[tq × tk]` mask,
    /// true where query `i` may not attend to key `j`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        tq: usize,
        tk: usize,
        blocked: &[Vec<bool>],
    ) -> Result<Var> {
        let c = &self.config;
        let q = self.linear(g, p, &format!("{prefix}.q"), q_in)?;
        let k = self.linear(g, p, &format!("{prefix}.k"), kv_in)?;
        let v = self.linear(g, p, &format!("{prefix}.v"), kv_in)?;
        let shape = AttentionShape {
            batch: blocked.len(),
            heads: c.n_heads,
            tq,
            tk,
        };
        let flat: Vec<bool> = blocked.iter().flatten().copied().collect();
        let merged = g.attention(q, k, v, shape, &flat)?;
        self.linear(g, p, &format!("{prefix}.o"), merged)
    }

    fn feed_forward(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var, train: bool) -> Result<Var> {
        let h = self.linear(g, p, &format!("{prefix}.ff1"), x)?;
        let h = g.relu(h);
        let h = self.dropout(g, h, train)?;
        self.linear(g, p, &format!("{prefix}.ff2"), h)
    }

    fn embed(&self, g: &mut Graph, table: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let d = self.config.d_model;
        let len = rows[0].len();
        let ids: Vec<usize> = rows.iter().flatten().copied().collect();
        let e = g.gather_rows(table, &ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        self.add_positions(g, e, rows.len(), len)
    }

    fn add_positions(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let pe = positional_encoding(len, d);
        let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new(vec![batch * len, d], tiled)?);
        g.add(x, pe)
    }

    fn conv_frontend(&self, g: &mut Graph, p: &Bound, maps: &[Tensor]) -> Result<Var> {
        let conv = self.config.conv.as_ref().ok_or_else(|| {
            Error::Contract("feature-map source needs a model with a conv extractor".into())
        })?;
        let mut out = Vec::with_capacity(maps.len());
        for map in maps {
            let (t, f) = (map.shape()[0], map.shape()[1]);
            if f != conv.n_freq {
                return Err(Error::dim("conv_frontend", map.shape(), &[t, conv.n_freq]));
            }
            let mut x = g.constant(map.reshape(&[t * f, 1])?);
            for l in 0..conv.n_layers {
                let cols = g.im2col(x, t, f, conv.kernel)?;
                let y = self.linear(g, p, &format!("conv.{l}"), cols)?;
                x = g.relu(y);
            }
            let x = g.reshape(x, &[t, f * conv.channels])?;
            out.push(self.linear(g, p, "conv.proj", x)?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            g.concat_rows(&out)
        }
    }

    fn encode(&self, g: &mut Graph, p: &Bound, src: &Source, train: bool) -> Result<Encoded> {
        let c = &self.config;
        let (x, batch, len, key_pad) = match src {
            Source::Tokens(rows) => {
                if rows.is_empty() || rows[0].is_empty() {
                    return Err(Error::DegenerateBatch("empty source".into()));
                }
                let len = rows[0].len();
                if rows.iter().any(|r| r.len() != len) {
                    return Err(Error::Contract("ragged source rows".into()));
                }
                if len > c.max_len {
                    return Err(Error::dim("source length", &[len], &[c.max_len]));
                }
                if c.conv.is_some() {
                    return Err(Error::Contract("conv model expects feature-map sources".into()));
                }
                let table = p.get("src.embed")?;
                let x = self.embed(g, table, rows)?;
                let key_pad = rows
                    .iter()
                    .map(|r| r.iter().map(|&t| t == PAD).collect())
                    .collect();
                (x, rows.len(), len, key_pad)
            }
            Source::Features(maps) => {
                if maps.is_empty() {
                    return Err(Error::DegenerateBatch("empty source".into()));
                }
                let len = maps[0].shape()[0];
                if len > c.max_len {
                    return Err(Error::dim("source length", &[len], &[c.max_len]));
                }
                let x = self.conv_frontend(g, p, maps)?;
                let x = self.add_positions(g, x, maps.len(), len)?;
                (x, maps.len(), len, vec![vec![false; len]; maps.len()])
            }
        };
        let mut x = self.dropout(g, x, train)?;
        let blocked: Vec<Vec<bool>> = key_pad
            .iter()
            .map(|pad: &Vec<bool>| (0..len).flat_map(|_| pad.iter().copied()).collect())
            .collect();
        for l in 0..c.n_encoder_layers {
            let pre = format!("enc.{l}");
            let a = self.attention(g, p, &format!("{pre}.self"), x, x, len, len, &blocked)?;
            let a = self.dropout(g, a, train)?;
            let r = g.add(x, a)?;
            x = self.norm(g, p, &format!("{pre}.ln1"), r)?;
            let f = self.feed_forward(g, p, &pre, x, train)?;
            let f = self.dropout(g, f, train)?;
            let r = g.add(x, f)?;
            x = self.norm(g, p, &format!("{pre}.ln2"), r)?;
        }
        Ok(Encoded {
            memory: x,
            batch,
            len,
            key_pad,
        })
    }

    /// Decoder logits `[B*T × tgt_vocab]` for teacher-forced inputs.
    fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: &Encoded,
        tgt_in: &[Vec<usize>],
        train: bool,
    ) -> Result<Var> {
        let c = &self.config;
        if tgt_in.len() != enc.batch {
            return Err(Error::dim("decode batch", &[tgt_in.len()], &[enc.batch]));
        }
        let t = tgt_in.first().map_or(0, Vec::len);
        if t == 0 || tgt_in.iter().any(|r| r.len() != t) {
            return Err(Error::Contract("decoder inputs must be non-empty and rectangular".into()));
        }
        if t > c.max_len {
            return Err(Error::dim("target length", &[t], &[c.max_len]));
        }
        let table = p.get("tgt.embed")?;
        let x = self.embed(g, table, tgt_in)?;
        let mut x = self.dropout(g, x, train)?;

        let causal: Vec<bool> = (0..t).flat_map(|i| (0..t).map(move |j| j > i)).collect();
        let self_blocked = vec![causal; enc.batch];
        let cross_blocked: Vec<Vec<bool>> = enc
            .key_pad
            .iter()
            .map(|pad| (0..t).flat_map(|_| pad.iter().copied()).collect())
            .collect();
        for l in 0..c.n_decoder_layers {
            let pre = format!("dec.{l}");
            let a = self.attention(g, p, &format!("{pre}.self"), x, x, t, t, &self_blocked)?;
            let a = self.dropout(g, a, train)?;
            let r = g.add(x, a)?;
            x = self.norm(g, p, &format!("{pre}.ln1"), r)?;
            let a = self.attention(
                g,
                p,
                &format!("{pre}.cross"),
                x,
                enc.memory,
                t,
                enc.len,
                &cross_blocked,
            )?;
            let a = self.dropout(g, a, train)?;
            let r = g.add(x, a)?;
            x = self.norm(g, p, &format!("{pre}.ln2"), r)?;
            let f = self.feed_forward(g, p, &pre, x, train)?;
            let f = self.dropout(g, f, train)?;
            let r = g.add(x, f)?;
            x = self.norm(g, p, &format!("{pre}.ln3"), r)?;
        }
        self.linear(g, p, "out", x)
    }

    fn logits_var(&self, g: &mut Graph, p: &Bound, batch: &SequenceBatch, train: bool) -> Result<Var> {
        let enc = self.encode(g, p, &batch.src, train)?;
        self.decode(g, p, &enc, &batch.tgt_in, train)
    }

    /// Teacher-forced logits, shaped `[B × T × tgt_vocab]`.
    pub fn forward_logits(&self, params: &ParamSet, batch: &SequenceBatch, train: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let logits = self.logits_var(&mut g, &p, batch, train)?;
        g.value(logits)
            .reshape(&[batch.batch_size(), batch.tgt_len(), self.config.tgt_vocab])
    }

    /// Mean negative log-likelihood of `tgt_out` over non-pad positions.
    pub fn sequence_nll(&self, g: &mut Graph, p: &Bound, batch: &SequenceBatch, train: bool) -> Result<Var> {
        let logits = self.logits_var(g, p, batch, train)?;
        let labels: Vec<usize> = batch.tgt_out.iter().flatten().copied().collect();
        g.cross_entropy(logits, &labels, Some(PAD))
    }

    /// Runs the encoder for inference; returns `[S × d]` memory and the
    /// source padding mask for a single-example source.
    pub(crate) fn encode_one(&self, params: &ParamSet, src: &Source) -> Result<(Tensor, Vec<bool>)> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &p, src, false)?;
        Ok((g.value(enc.memory).clone(), enc.key_pad[0].clone()))
    }

    /// Last-position log-probabilities for each prefix, all decoded against
    /// the same encoder memory.
    pub(crate) fn next_log_probs(
        &self,
        params: &ParamSet,
        memory: &Tensor,
        key_pad: &[bool],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let s = memory.shape()[0];
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let tiled: Vec<f64> = (0..n).flat_map(|_| memory.data().iter().copied()).collect();
        let mem = g.constant(Tensor::new(vec![n * s, self.config.d_model], tiled)?);
        let enc = Encoded {
            memory: mem,
            batch: n,
            len: s,
            key_pad: vec![key_pad.to_vec(); n],
        };
        let logits = self.decode(&mut g, &p, &enc, prefixes, false)?;
        let t = prefixes[0].len();
        let values = g.value(logits);
        Ok((0..n)
            .map(|b| log_softmax(values.row(b * t + t - 1)))
            .collect())
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

impl Learner for Seq2Seq {
    type Batch = SequenceBatch;

    fn loss(&self, g: &mut Graph, params: &Bound, batch: &SequenceBatch, train: bool) -> Result<Var> {
        self.sequence_nll(g, params, batch, train)
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        Seq2Seq::init_params(self, seed)
    }
}
