//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! output value and whatever the backward pass needs. [`Tape::backward`]
//! walks the node list in exact reverse order and returns gradients for
//! every named parameter registered on the tape. Leaves registered with
//! [`Tape::constant`] or [`Tape::frozen`] never receive gradients, which is
//! how frozen partitions stay untouched during prompt adaptation.
//!
//! Forward flops are recorded as ops execute; see [`FlopReport`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::flops::{FlopClass, FlopReport};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, strides, Real, Tensor};
use super::NumericError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How rows of an `[.., d]` activation are partitioned into attention groups.
///
/// The `Channel`, `Time` and `Joint` layouts assume rows ordered as
/// `(batch, seq, chan)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group containing every row.
    Whole,
    /// Attend across channels at each sequence position.
    Channel { batch: usize, seq: usize, chan: usize },
    /// Attend across sequence positions within each channel.
    Time { batch: usize, seq: usize, chan: usize },
    /// Attend across all `seq * chan` tokens of a sample.
    Joint { batch: usize, seq: usize, chan: usize },
}

impl Grouping {
    fn rows(&self) -> Option<usize> {
        match *self {
            Grouping::Whole => None,
            Grouping::Channel { batch, seq, chan }
            | Grouping::Time { batch, seq, chan }
            | Grouping::Joint { batch, seq, chan } => Some(batch * seq * chan),
        }
    }

    /// `(group count, members per group)` for `rows` total rows.
    pub fn dims(&self, rows: usize) -> (usize, usize) {
        match *self {
            Grouping::Whole => (1, rows),
            Grouping::Channel { batch, seq, chan } => (batch * seq, chan),
            Grouping::Time { batch, seq, chan } => (batch * chan, seq),
            Grouping::Joint { batch, seq, chan } => (batch, seq * chan),
        }
    }

    /// Flat row index of member `i` of group `g`.
    pub fn row(&self, g: usize, i: usize) -> usize {
        match *self {
            Grouping::Whole => i,
            Grouping::Channel { chan, .. } => g * chan + i,
            Grouping::Time { seq, chan, .. } => {
                let (b, m) = (g / chan, g % chan);
                (b * seq + i) * chan + m
            }
            Grouping::Joint { seq, chan, .. } => g * seq * chan + i,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Square { a: usize },
    Gelu { a: usize },
    Dropout { a: usize, mask: Vec<T> },
    Clamp { a: usize, lo: T, hi: T },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Broadcast { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: usize, k: usize, v: usize, grouping: Grouping, heads: usize, probs: Vec<T>, mask: Option<Vec<T>> },
    RowNormalize { a: usize, norms: Vec<T> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    PairwiseDistance { a: usize, b: usize },
    MinLast { a: usize, argmin: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, usize>,
    frozen: BTreeMap<String, usize>,
    flops: FlopReport,
    scope: &'static str,
    record: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericError {
    NumericError::ShapeMismatch { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeMap::new(),
            flops: FlopReport::default(),
            scope: "other",
            record: true,
            dropout_rng: None,
        }
    }

    /// A tape that keeps no backward buffers. Cheaper for pure inference.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Enables dropout with masks drawn from `rng`. Without it dropout is identity.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequent flop counts with a module name.
    pub fn set_scope(&mut self, scope: &'static str) {
        self.scope = scope;
    }

    pub fn flops(&self) -> &FlopReport {
        &self.flops
    }

    pub fn count_flops(&mut self, class: FlopClass, n: u64) {
        self.flops.add(class, self.scope, n);
    }

    fn check(&self, v: Var) -> Result<usize, NumericError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericError::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: name });
        }
        let op = if self.record { op } else { Op::Leaf };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Ok(Var { tape: self.id, index })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumericError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Registers a trainable parameter. Re-registering a name returns the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var, NumericError> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var { tape: self.id, index: i });
        }
        let v = self.push(value.clone(), Op::Leaf, true, "param")?;
        self.params.insert(name.to_string(), v.index);
        Ok(v)
    }

    /// Registers a parameter that takes part in the forward pass but receives no gradient.
    pub fn frozen(&mut self, name: &str, value: &Tensor<T>) -> Result<Var, NumericError> {
        if let Some(&i) = self.frozen.get(name) {
            return Ok(Var { tape: self.id, index: i });
        }
        let v = self.push(value.clone(), Op::Leaf, false, "param")?;
        self.frozen.insert(name.to_string(), v.index);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = super::tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let (rows, k, n) = (self.nodes[ia].value.rows(), self.nodes[ia].value.cols(), out.cols());
        self.count_flops(FlopClass::MatMul, 2 * (rows * k * n) as u64);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::MatMul { a: ia, b: ib }, rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>), NumericError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.count_flops(FlopClass::Elementwise, out.len() as u64);
        Ok((ia, ib, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::Add { a: ia, b: ib }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::Sub { a: ia, b: ib }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::Mul { a: ia, b: ib }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * factor);
        self.count_flops(FlopClass::Elementwise, out.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::Scale { a: ia, factor }, rg, "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * v);
        self.count_flops(FlopClass::Elementwise, out.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::Square { a: ia }, rg, "square")
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| gelu_parts(x).0);
        self.count_flops(FlopClass::Elementwise, out.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::Gelu { a: ia }, rg, "gelu")
    }

    /// Inverted dropout; identity unless the tape was built `with_dropout` and `rate > 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, NumericError> {
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return Ok(a);
        }
        let ia = self.check(a)?;
        let mask = self.draw_mask(self.nodes[ia].value.len(), rate);
        let data = self.nodes[ia].value.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(self.nodes[ia].value.shape(), data)?;
        let rg = self.rg(ia);
        self.push(out, Op::Dropout { a: ia, mask }, rg, "dropout")
    }

    fn draw_mask(&mut self, n: usize, rate: f64) -> Vec<T> {
        let rng = self.dropout_rng.as_mut().expect("dropout rng");
        let keep = T::lit(1.0 / (1.0 - rate));
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect()
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(lo).min(hi));
        self.count_flops(FlopClass::Elementwise, out.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::Clamp { a: ia, lo, hi }, rg, "clamp")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(ia);
        self.push(out, Op::Reshape { a: ia }, rg, "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.permute(perm)?;
        let rg = self.rg(ia);
        self.push(out, Op::Permute { a: ia, perm: perm.to_vec() }, rg, "permute")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        if self.shape(a).len() != 2 {
            return Err(mismatch("transpose", format!("needs rank 2, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Right-aligned broadcast; source axes must equal the target or be 1.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let map = broadcast_map(src.shape(), shape)?;
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(ia);
        self.push(out, Op::Broadcast { a: ia }, rg, "broadcast")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::concat(&refs, axis)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::Concat { parts: idx, axis }, rg, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.slice_axis(axis, start, len)?;
        let rg = self.rg(ia);
        self.push(out, Op::Slice { a: ia, axis, start }, rg, "slice")
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.mean_axis(axis)?;
        self.count_flops(FlopClass::Elementwise, self.nodes[ia].value.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::MeanAxis { a: ia, axis }, rg, "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        self.count_flops(FlopClass::Elementwise, self.nodes[ia].value.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::SumAll { a: ia }, rg, "sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if v.is_empty() {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.count_flops(FlopClass::Elementwise, v.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::MeanAll { a: ia }, rg, "mean")
    }

    /// Last-axis layer normalization followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xv = &self.nodes[ix].value;
        let d = xv.cols();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != [d] || b.shape() != [d] || d == 0 {
            return Err(mismatch("layer_norm", format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), g.shape(), b.shape())));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.count_flops(FlopClass::Normalization, 5 * out.len() as u64);
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let (xhat, inv_std) = if self.record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std }, rg, "layer_norm")
    }

    /// Multi-head scaled dot-product attention within each group of rows.
    ///
    /// `q`, `k`, `v` share shape `[.., d]`; head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`. Attention weights are row-max
    /// stabilized and, on a training tape, dropped out at `dropout`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, grouping: Grouping, heads: usize, dropout: f64) -> Result<Var, NumericError> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(mismatch("attention", format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(mismatch("attention", format!("width {d} not divisible into {heads} heads")));
        }
        if grouping.rows().is_some_and(|r| r != rows) {
            return Err(mismatch("attention", format!("{grouping:?} does not cover {rows} rows")));
        }
        let (groups, n) = grouping.dims(rows);
        let dk = d / heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let use_dropout = dropout > 0.0 && self.dropout_rng.is_some();
        let mask = if use_dropout { Some(self.draw_mask(groups * heads * n * n, dropout)) } else { None };
        let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);

        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); groups * heads * n * n];
        let mut logits = vec![T::zero(); n];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dk;
                let base = (g * heads + h) * n * n;
                for i in 0..n {
                    let qrow = &qv.row(grouping.row(g, i))[c0..c0 + dk];
                    let mut max = T::neg_infinity();
                    for (j, l) in logits.iter_mut().enumerate() {
                        let krow = &kv.row(grouping.row(g, j))[c0..c0 + dk];
                        let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        *l = s;
                        max = max.max(s);
                    }
                    if !max.is_finite() {
                        return Err(NumericError::NonFinite { op: "attention logits" });
                    }
                    let mut z = T::zero();
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let prow = &mut probs[base + i * n..base + (i + 1) * n];
                    for (p, &l) in prow.iter_mut().zip(&logits) {
                        *p = l / z;
                    }
                    let orow = grouping.row(g, i) * d + c0;
                    for j in 0..n {
                        let mut w = prow[j];
                        if let Some(m) = &mask {
                            w *= m[base + i * n + j];
                        }
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = &vv.row(grouping.row(g, j))[c0..c0 + dk];
                        for (o, &x) in out[orow..orow + dk].iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape(), out)?;
        let score_macs = (groups * heads * n * n * dk) as u64;
        self.flops.score_macs += score_macs;
        self.count_flops(FlopClass::AttentionScore, 2 * score_macs);
        self.count_flops(FlopClass::Softmax, 5 * (groups * heads * n * n) as u64);
        self.count_flops(FlopClass::AttentionMix, 2 * score_macs);
        let rg = self.rg(iq) || self.rg(ik) || self.rg(iv);
        let keep = self.record;
        let op = Op::Attention {
            q: iq,
            k: ik,
            v: iv,
            grouping,
            heads,
            probs: if keep { probs } else { Vec::new() },
            mask: if keep { mask } else { None },
        };
        self.push(out, op, rg, "attention")
    }

    /// Pre-dropout attention weights of an attention node, laid out
    /// `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes.get(v.index)?.op {
            Op::Attention { probs, .. } if v.tape == self.id => Some(probs),
            _ => None,
        }
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let mut norms = Vec::with_capacity(av.rows());
        let mut out = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            let row = av.row(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let inv = if n > T::zero() { T::one() / n } else { T::zero() };
            out.extend(row.iter().map(|&v| v * inv));
        }
        let out = Tensor::new(av.shape(), out)?;
        self.count_flops(FlopClass::Normalization, 5 * out.len() as u64);
        let rg = self.rg(ia);
        self.push(out, Op::RowNormalize { a: ia, norms }, rg, "row_normalize")
    }

    /// Mean softmax cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericError> {
        let il = self.check(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || lv.rows() != labels.len() || lv.rows() == 0 {
            return Err(mismatch("cross_entropy", format!("logits {:?} for {} labels", lv.shape(), labels.len())));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(NumericError::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&v| (v - max).exp()).sum::<T>();
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
            loss += z.ln() + max - row[y];
        }
        let out = Tensor::scalar(loss / T::lit(labels.len() as f64));
        self.count_flops(FlopClass::Normalization, 5 * lv.len() as u64);
        let rg = self.rg(il);
        self.push(out, Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs }, rg, "cross_entropy")
    }

    /// Euclidean distances between rows of `a[B, D]` and `b[C, D]`, shape `[B, C]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(mismatch("pairwise_distance", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (nb, nc) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(nb * nc);
        for i in 0..nb {
            for j in 0..nc {
                let s = av.row(i).iter().zip(bv.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
                out.push(s.sqrt());
            }
        }
        self.count_flops(FlopClass::Elementwise, 3 * (nb * nc * av.cols()) as u64);
        let out = Tensor::new(&[nb, nc], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::PairwiseDistance { a: ia, b: ib }, rg, "pairwise_distance")
    }

    /// Minimum over the last axis (first index wins ties).
    pub fn min_last(&mut self, a: Var) -> Result<Var, NumericError> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.cols() == 0 {
            return Err(mismatch("min", "empty axis".into()));
        }
        let mut argmin = Vec::with_capacity(av.rows());
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let (j, &m) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, (j, v)| if *v < *best.1 { (j, v) } else { best });
            argmin.push(j);
            out.push(m);
        }
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.count_flops(FlopClass::Elementwise, av.len() as u64);
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(ia);
        self.push(out, Op::MinLast { a: ia, argmin }, rg, "min")
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Every registered parameter
    /// appears in the result; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericError> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(NumericError::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        if !self.record {
            return Err(NumericError::NotRecorded);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(self.nodes[il].value.shape()));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(self
            .params
            .iter()
            .map(|(name, &i)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
                (name.clone(), g)
            })
            .collect())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], i: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let slot = grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
        f(slot.data_mut());
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (rows, k, n) = (val(a).rows(), val(a).cols(), g.cols());
                self.acc(grads, a, |ga| gemm_nt_acc(gd, val(b).data(), ga, rows, k, n));
                self.acc(grads, b, |gb| gemm_tn_acc(val(a).data(), gd, gb, rows, k, n));
            }
            &Op::Add { a, b } => {
                self.acc(grads, a, |ga| add_into(ga, gd));
                self.acc(grads, b, |gb| add_into(gb, gd));
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, |ga| add_into(ga, gd));
                self.acc(grads, b, |gb| gb.iter_mut().zip(gd).for_each(|(o, &x)| *o -= x));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                self.acc(grads, a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                });
                self.acc(grads, b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                });
            }
            &Op::Scale { a, factor } => self.acc(grads, a, |ga| ga.iter_mut().zip(gd).for_each(|(o, &x)| *o += x * factor)),
            &Op::Square { a } => {
                let av = val(a).data();
                self.acc(grads, a, |ga| {
                    for ((o, &x), &v) in ga.iter_mut().zip(gd).zip(av) {
                        *o += T::lit(2.0) * v * x;
                    }
                })
            }
            &Op::Gelu { a } => {
                let av = val(a).data();
                self.acc(grads, a, |ga| {
                    for ((o, &x), &v) in ga.iter_mut().zip(gd).zip(av) {
                        *o += x * gelu_parts(v).1;
                    }
                })
            }
            Op::Dropout { a, mask } => self.acc(grads, *a, |ga| {
                for ((o, &x), &m) in ga.iter_mut().zip(gd).zip(mask) {
                    *o += x * m;
                }
            }),
            &Op::Clamp { a, lo, hi } => {
                let av = val(a).data();
                self.acc(grads, a, |ga| {
                    for ((o, &x), &v) in ga.iter_mut().zip(gd).zip(av) {
                        if v >= lo && v <= hi {
                            *o += x;
                        }
                    }
                })
            }
            &Op::Reshape { a } => self.acc(grads, a, |ga| add_into(ga, gd)),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = g.permute(&inv).expect("inverse permutation");
                self.acc(grads, *a, |ga| add_into(ga, back.data()));
            }
            &Op::Broadcast { a } => {
                let map = broadcast_map(val(a).shape(), g.shape()).expect("broadcast shape");
                self.acc(grads, a, |ga| {
                    for (&src, &x) in map.iter().zip(gd) {
                        ga[src] += x;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let piece = g.slice_axis(*axis, start, len).expect("concat slice");
                        self.acc(grads, p, |gp| add_into(gp, piece.data()));
                    }
                    start += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let shape = val(a).shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let (extent, len) = (shape[axis], g.shape()[axis]);
                self.acc(grads, a, |ga| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &gd[src..src + len * inner]);
                    }
                });
            }
            &Op::MeanAxis { a, axis } => {
                let shape = val(a).shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let extent = shape[axis];
                let inv = T::one() / T::lit(extent as f64);
                self.acc(grads, a, |ga| {
                    for o in 0..outer {
                        for e in 0..extent {
                            let dst = &mut ga[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                *d += x * inv;
                            }
                        }
                    }
                });
            }
            &Op::SumAll { a } => self.acc(grads, a, |ga| ga.iter_mut().for_each(|o| *o += gd[0])),
            &Op::MeanAll { a } => {
                let s = gd[0] / T::lit(val(a).len() as f64);
                self.acc(grads, a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = g.cols();
                let rows = g.rows();
                let gain_v = val(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for r in 0..rows {
                        add_into(gb, &gd[r * d..(r + 1) * d]);
                    }
                });
                let dt = T::lit(d as f64);
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gain_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let k = inv_std[r] / dt;
                        for j in 0..d {
                            gx[r * d + j] += k * (dt * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, grouping, heads, probs, mask } => {
                self.attention_backward(g, (*q, *k, *v), *grouping, *heads, probs, mask.as_deref(), grads)
            }
            Op::RowNormalize { a, norms } => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                self.acc(grads, *a, |ga| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                        for j in 0..c {
                            ga[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = val(*logits).cols();
                let s = gd[0] / T::lit(labels.len() as f64);
                self.acc(grads, *logits, |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { T::one() } else { T::zero() };
                            gl[r * c + j] += s * (probs[r * c + j] - t);
                        }
                    }
                });
            }
            &Op::PairwiseDistance { a, b } => {
                let (av, bv, dist) = (val(a), val(b), &self.nodes[i].value);
                let (nb, nc, d) = (av.rows(), bv.rows(), av.cols());
                let coef = |r: usize, c: usize| {
                    let dv = dist.data()[r * nc + c];
                    if dv > T::zero() { gd[r * nc + c] / dv } else { T::zero() }
                };
                self.acc(grads, a, |ga| {
                    for r in 0..nb {
                        for c in 0..nc {
                            let w = coef(r, c);
                            for j in 0..d {
                                ga[r * d + j] += w * (av.row(r)[j] - bv.row(c)[j]);
                            }
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for r in 0..nb {
                        for c in 0..nc {
                            let w = coef(r, c);
                            for j in 0..d {
                                gb[c * d + j] -= w * (av.row(r)[j] - bv.row(c)[j]);
                            }
                        }
                    }
                });
            }
            Op::MinLast { a, argmin } => {
                let c = val(*a).cols();
                self.acc(grads, *a, |ga| {
                    for (r, &j) in argmin.iter().enumerate() {
                        ga[r * c + j] += gd[r];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        (q, k, v): (usize, usize, usize),
        grouping: Grouping,
        heads: usize,
        probs: &[T],
        mask: Option<&[T]>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let (rows, d) = (qv.rows(), qv.cols());
        let (groups, n) = grouping.dims(rows);
        let dk = d / heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); n];
        for grp in 0..groups {
            for h in 0..heads {
                let c0 = h * dk;
                let base = (grp * heads + h) * n * n;
                for i in 0..n {
                    let ri = grouping.row(grp, i);
                    let go = &g.row(ri)[c0..c0 + dk];
                    let prow = &probs[base + i * n..base + (i + 1) * n];
                    for j in 0..n {
                        let rj = grouping.row(grp, j);
                        let m = mask.map_or(T::one(), |m| m[base + i * n + j]);
                        let vrow = &vv.row(rj)[c0..c0 + dk];
                        dp[j] = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>() * m;
                        let w = prow[j] * m;
                        if w != T::zero() {
                            for (o, &x) in gv[rj * d + c0..rj * d + c0 + dk].iter_mut().zip(go) {
                                *o += w * x;
                            }
                        }
                    }
                    let dot = prow.iter().zip(&dp).map(|(&p, &x)| p * x).sum::<T>();
                    let qrow = &qv.row(ri)[c0..c0 + dk];
                    for j in 0..n {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let rj = grouping.row(grp, j);
                        let krow = &kv.row(rj)[c0..c0 + dk];
                        for (o, &x) in gq[ri * d + c0..ri * d + c0 + dk].iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        for (o, &x) in gk[rj * d + c0..rj * d + c0 + dk].iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |t| add_into(t, &gq));
        self.acc(grads, k, |t| add_into(t, &gk));
        self.acc(grads, v, |t| add_into(t, &gv));
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(gelu(x), d gelu / dx)` for the tanh approximation.
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    (y, half * (T::one() + t) + half * x * (T::one() - t * t) * du)
}

/// For each flat index of `to`, the flat index of `from` it reads.
fn broadcast_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>, NumericError> {
    if from.len() > to.len() {
        return Err(mismatch("broadcast", format!("{from:?} -> {to:?}")));
    }
    let pad = to.len() - from.len();
    let src_strides = strides(from);
    let mut eff = vec![0usize; to.len()];
    for (ax, &t) in to.iter().enumerate() {
        if ax < pad {
            continue;
        }
        let f = from[ax - pad];
        if f == t {
            eff[ax] = src_strides[ax - pad];
        } else if f != 1 {
            return Err(mismatch("broadcast", format!("{from:?} -> {to:?}")));
        }
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&eff).map(|(&i, &s)| i * s).sum());
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

/// Plain (tape-free) softmax attention on `q[n, dk]`, `k[n, dk]`, `v[n, dv]`.
/// Returns `(output[n, dv], weights[n, n])`.
pub fn softmax_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NumericError> {
    let n = q.rows();
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.rows() != n || v.rows() != n || q.cols() != k.cols() || q.cols() == 0 {
        return Err(mismatch("softmax_attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        let logits: Vec<T> = (0..n)
            .map(|j| q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| a * b).sum::<T>() * scale)
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(NumericError::NonFinite { op: "attention logits" });
        }
        let z = logits.iter().map(|&l| (l - max).exp()).sum::<T>();
        w.extend(logits.iter().map(|&l| (l - max).exp() / z));
    }
    let weights = Tensor::new(&[n, n], w)?;
    let mut out = vec![T::zero(); n * v.cols()];
    gemm_acc(weights.data(), v.data(), &mut out, n, n, v.cols());
    Ok((Tensor::new(&[n, v.cols()], out)?, weights))
}
