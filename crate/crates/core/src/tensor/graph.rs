//! Recorded forward operations and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only recording. Every operation evaluates
//! eagerly, stores its value, and remembers its inputs plus whatever
//! intermediates the backward rule needs. Inputs always have smaller ids
//! than the node that consumes them, so walking ids in descending order is
//! a valid reverse topological order.
//!
//! Only first derivatives are supported. Gradients are plain values and are
//! never recorded themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        scalar_b: bool,
    },
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        src: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Im2Col {
        x: Var,
        h: usize,
        w: usize,
        k: usize,
    },
    WeightedSum {
        terms: Vec<Var>,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch·tq × heads·d_k]`, keys `[batch·tk × heads·d_k]` and
/// values `[batch·tk × heads·d_v]`, row-major, with example `b` occupying a
/// contiguous block of rows and head `h` a contiguous block of columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub heads: usize,
    pub tq: usize,
    pub tk: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only recording of a forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// A graph whose dropout masks are drawn from a stream seeded by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |k| {
            b.ok_or_else(|| Error::Contract(format!("{kind:?} needs a second operand")))
                .map(|b| (k, b))
        };
        match kind {
            ElementwiseOp::Add => {
                let (k, b) = binary(BinaryKind::Add)?;
                self.binary(k, a, b)
            }
            ElementwiseOp::Sub => {
                let (k, b) = binary(BinaryKind::Sub)?;
                self.binary(k, a, b)
            }
            ElementwiseOp::Mul => {
                let (k, b) = binary(BinaryKind::Mul)?;
                self.binary(k, a, b)
            }
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let scalar_b = if ta.shape() == tb.shape() {
            false
        } else if tb.numel() == 1 {
            true
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = if scalar_b {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                scalar_b,
            },
            rg,
        ))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// Adds the vector `row` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Error::dim("add_row", sa, sr));
        }
        let n = sa[1];
        let r = self.nodes[row.0].value.data();
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape().len() != 2 {
            return Err(Error::dim("softmax_rows", t.shape(), &[]));
        }
        let (m, n) = t.matrix_dims();
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// `softmax(q·kᵀ/√d_k + mask)·v` for every example and head at once.
    ///
    /// `blocked` has `batch·tq·tk` entries; a blocked query/key pair gets
    /// exactly zero weight (its score is replaced by a large negative
    /// constant before the softmax, as [`Graph::mask_fill`] would).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, blocked: &[bool]) -> Result<Var> {
        const FILL: f64 = -1e30;
        let AttentionShape { batch, heads, tq, tk } = shape;
        let (qr, qc) = self.dims2(q);
        let (kr, kc) = self.dims2(k);
        let (vr, vc) = self.dims2(v);
        if heads == 0 || qr != batch * tq || kr != batch * tk || vr != kr || qc != kc || qc % heads != 0 || vc % heads != 0 {
            return Err(Error::dim("attention", &[qr, qc], &[kr, kc, vr, vc]));
        }
        if blocked.len() != batch * tq * tk {
            return Err(Error::dim("attention mask", &[blocked.len()], &[batch * tq * tk]));
        }
        let (dk, dv) = (qc / heads, vc / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * vc];
        let mut row = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * qc + h * dk..][..dk];
                    for (j, sj) in row.iter_mut().enumerate() {
                        *sj = if blocked[(b * tq + i) * tk + j] {
                            FILL
                        } else {
                            let krow = &kd[(b * tk + j) * kc + h * dk..][..dk];
                            let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                            dot * scale
                        };
                    }
                    let p = softmax_rows(&row, 1, tk);
                    let orow = &mut out[(b * tq + i) * vc + h * dv..][..dv];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * tk + j) * vc + h * dv..][..dv];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                    probs[((b * heads + h) * tq + i) * tk..][..tk].copy_from_slice(&p);
                }
            }
        }
        let value = Tensor::new(vec![batch * tq, vc], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true with `fill`. Masked entries
    /// receive no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if mask.len() != t.numel() {
            return Err(Error::dim("mask_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskFill(a, mask), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`. Positions equal to `ignore_index` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (m, v) = (t.shape()[0], t.shape()[1]);
        let mut targets = Vec::with_capacity(m);
        for &l in labels {
            if Some(l) == ignore_index {
                targets.push(None);
            } else if l < v {
                targets.push(Some(l));
            } else {
                return Err(Error::Label(format!("label {l} outside vocabulary of size {v}")));
            }
        }
        let count = targets.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::DegenerateBatch(
                "every position is ignored".into(),
            ));
        }
        let x = t.data();
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            if let Some(l) = target {
                total += lse - row[*l];
            }
        }
        let loss = (total / count as f64).max(0.0);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: targets,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(Error::dim("gather_rows", t.shape(), &[]));
        }
        let (rows, n) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Label(format!("token {id} outside vocabulary of size {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rectangular block `[r0, r0+rows) × [c0, c0+cols)` of a matrix.
    pub fn slice(&mut self, src: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || rows == 0 || cols == 0 || r0 + rows > s[0] || c0 + cols > s[1] {
            return Err(Error::dim("slice", s, &[r0, rows, c0, cols]));
        }
        let n = s[1];
        let x = self.nodes[src.0].value.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&x[r * n + c0..r * n + c0 + cols]);
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::Slice { src, r0, c0 }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.shape(first)[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != n {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(gain) != [s[1]] || self.shape(bias) != [s[1]] {
            return Err(Error::dim("layer_norm", s, self.shape(gain)));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. The keep mask comes from the graph's seeded stream,
    /// so replaying a graph with the same seed reproduces it.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Patch extraction for a `k×k` convolution with zero "same" padding.
    ///
    /// `x` holds a channel-last feature map `[h*w × c]`; the result is
    /// `[h*w × k*k*c]`, one flattened patch per output position, laid out
    /// as `(di, dj, channel)`.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != h * w || k == 0 || k.is_multiple_of(2) {
            return Err(Error::dim("im2col", s, &[h, w, k]));
        }
        let c = s[1];
        let pad = k / 2;
        let xv = self.nodes[x.0].value.data();
        let width = k * k * c;
        let mut data = vec![0.0; h * w * width];
        for i in 0..h {
            for j in 0..w {
                let out = &mut data[(i * w + j) * width..(i * w + j + 1) * width];
                for di in 0..k {
                    for dj in 0..k {
                        let (si, sj) = ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        let src = (si as usize * w + sj as usize) * c;
                        let dst = (di * k + dj) * c;
                        out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![h * w, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Im2Col { x, h, w, k }, rg))
    }

    /// `Σ weights[i] · terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::Contract(format!(
                "weighted_sum over {} terms with {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let mut s = 0.0;
        for (&t, &w) in terms.iter().zip(weights) {
            let v = &self.nodes[t.0].value;
            if !v.is_scalar() {
                return Err(Error::dim("weighted_sum", v.shape(), &[]));
            }
            s += w * v.data()[0];
        }
        let rg = self.rg(terms);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Nodes are visited in descending id order; fan-out contributions are
    /// summed in that order, which makes repeated runs bit-identical.
    pub fn backward(&self, root: Var) -> Result<GradStore> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract("root is not part of this graph".into()))?;
        if !root_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|g| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), g).expect("grad shape")
                })
            })
            .collect();
        Ok(GradStore { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                scalar_b,
            } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for (d, gi) in ga.iter_mut().zip(g) {
                                *d += gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, (d, gi)) in ga.iter_mut().zip(g).enumerate() {
                                *d += gi * bv[if *scalar_b { 0 } else { i }];
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    let contrib = |i: usize| match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * av[i],
                    };
                    if *scalar_b {
                        let mut s = 0.0;
                        for i in 0..g.len() {
                            s += contrib(i);
                        }
                        gb[0] += s;
                    } else {
                        for (i, d) in gb.iter_mut().enumerate() {
                            *d += contrib(i);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ga = self.acc(grads, *a);
                for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = self.acc(grads, *a);
                for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Scale(a, c) => {
                let ga = self.acc(grads, *a);
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data();
                    // dA = dC · Bᵀ
                    matmul_nt_acc(self.acc(grads, *a), g, bv, m, n, k);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data();
                    // dB = Aᵀ · dC
                    matmul_tn_acc(self.acc(grads, *b), av, g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data();
                    // dA = dC · B
                    matmul_acc(self.acc(grads, *a), g, bv, m, n, k);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data();
                    // dB = dCᵀ · A
                    matmul_tn_acc(self.acc(grads, *b), g, av, m, n, k);
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.requires_grad(*row) {
                    let n = self.dims2(*row).1;
                    let gr = self.acc(grads, *row);
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % n] += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                let (m, n) = self.dims2(*a);
                let ga = self.acc(grads, *a);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[i * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.backprop_attention(*q, *k, *v, *shape, probs, g, grads),
            Op::MaskFill(a, mask) => {
                let ga = self.acc(grads, *a);
                for ((d, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gi;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let (_, v) = self.dims2(*logits);
                let scale = g[0] / *count as f64;
                let gl = self.acc(grads, *logits);
                for (i, label) in labels.iter().enumerate() {
                    let Some(l) = label else { continue };
                    for j in 0..v {
                        gl[i * v + j] += probs[i * v + j] * scale;
                    }
                    gl[i * v + l] -= scale;
                }
            }
            Op::Sum(a) => {
                let ga = self.acc(grads, *a);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let ga = self.acc(grads, *a);
                let s = g[0] / ga.len() as f64;
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
            Op::Gather { table, ids } => {
                let n = self.dims2(*table).1;
                let gt = self.acc(grads, *table);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[id * n + j] += g[i * n + j];
                    }
                }
            }
            Op::Slice { src, r0, c0 } => {
                let n = self.dims2(*src).1;
                let (rows, cols) = node.value.matrix_dims();
                let gs = self.acc(grads, *src);
                for r in 0..rows {
                    let dst = &mut gs[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols];
                    for (d, gi) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    if self.requires_grad(p) {
                        let gp = self.acc(grads, p);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.requires_grad(p) {
                        let gp = self.acc(grads, p);
                        for (d, gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims2(*x);
                let gv = self.nodes[gain.0].value.data();
                if self.requires_grad(*gain) {
                    let gg = self.acc(grads, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = self.acc(grads, *bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.acc(grads, *x);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            gx[i * n + j] +=
                                rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = self.acc(grads, *x);
                for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Reshape(x) => {
                let gx = self.acc(grads, *x);
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Im2Col { x, h, w, k } => {
                let c = self.dims2(*x).1;
                let pad = k / 2;
                let width = k * k * c;
                let gx = self.acc(grads, *x);
                for i in 0..*h {
                    for j in 0..*w {
                        let row = &g[(i * w + j) * width..(i * w + j + 1) * width];
                        for di in 0..*k {
                            for dj in 0..*k {
                                let (si, sj) =
                                    ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                                if si < 0 || sj < 0 || si >= *h as isize || sj >= *w as isize {
                                    continue;
                                }
                                let dst = (si as usize * w + sj as usize) * c;
                                let src = (di * k + dj) * c;
                                for ch in 0..c {
                                    gx[dst + ch] += row[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { terms, weights } => {
                for (&t, &w) in terms.iter().zip(weights) {
                    if self.requires_grad(t) {
                        self.acc(grads, t)[0] += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionShape { batch, heads, tq, tk } = shape;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let (qc, vc) = (self.dims2(q).1, self.dims2(v).1);
        let (dk, dv) = (qc / heads, vc / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tq {
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let go = &g[(b * tq + i) * vc + h * dv..][..dv];
                    let mut dot = 0.0;
                    for j in 0..tk {
                        let vrow = &vd[(b * tk + j) * vc + h * dv..][..dv];
                        let dp: f64 = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        ds[j] = dp;
                        dot += p[j] * dp;
                        if p[j] != 0.0 {
                            let gvrow = &mut gv[(b * tk + j) * vc + h * dv..][..dv];
                            for (d, &x) in gvrow.iter_mut().zip(go) {
                                *d += p[j] * x;
                            }
                        }
                    }
                    let qrow = &qd[(b * tq + i) * qc + h * dk..][..dk];
                    let gqrow_start = (b * tq + i) * qc + h * dk;
                    for j in 0..tk {
                        let s = p[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * tk + j) * qc + h * dk..][..dk];
                        for (d, &x) in gq[gqrow_start..][..dk].iter_mut().zip(krow) {
                            *d += s * x;
                        }
                        for (d, &x) in gk[(b * tk + j) * qc + h * dk..][..dk].iter_mut().zip(qrow) {
                            *d += s * x;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(var) {
                for (d, x) in self.acc(grads, var).iter_mut().zip(local) {
                    *d += x;
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// Gradients of a scalar root with respect to the differentiable leaves of
/// a recording.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    /// Gradient of the root with respect to `v`, if `v` is a differentiable
    /// leaf reachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`GradStore::get`], with zeros for leaves the root does not
    /// depend on.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
