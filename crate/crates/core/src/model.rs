//! Model configuration, parameter binding, the encode path and `RmGpt` itself.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, TokenSequence};
use crate::dataset::{SignalWindow, TaskKind, Target, WindowSource};
use crate::error::ModelError;
use crate::numeric::{FlopReport, FlopShape, Real, Tape, Tensor, Var};
use crate::token_space::{self, RulHead};
use crate::tokenizer::{self, PatchConfig};
use crate::training::params::{Partition, ParameterStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Factored,
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Post,
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub window_len: usize,
    pub prompt_len: usize,
    /// Spectral task tokens; the task segment is `1 + spectral_tokens` long.
    pub spectral_tokens: usize,
    /// Vectors per prototype. Only 1 is implemented.
    pub prototype_len: usize,
    pub max_signal_len: usize,
    pub dropout: f64,
    pub attention: AttentionKind,
    pub norm: NormPlacement,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            patch_len: 256,
            stride: 256,
            window_len: 2048,
            prompt_len: 10,
            spectral_tokens: 1,
            prototype_len: 1,
            max_signal_len: 2048,
            dropout: 0.1,
            attention: AttentionKind::Factored,
            norm: NormPlacement::Post,
            temperature: token_space::TEMPERATURE,
        }
    }

    pub fn paper() -> Self {
        Self {
            d_model: 512,
            layers: 4,
            heads: 8,
            d_ff: 2048,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: String| Err(ModelError::InvalidConfig { field: field.into(), msg });
        if self.d_model == 0 {
            return bad("d_model", "must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", format!("d not divisible by H (d={}, H={})", self.d_model, self.heads));
        }
        if self.layers == 0 {
            return bad("layers", "K must be at least 1".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be positive".into());
        }
        self.patch().validate()?;
        if self.signal_len() > self.max_signal_len {
            return Err(ModelError::PositionTable {
                signal_len: self.signal_len(),
                max: self.max_signal_len,
            });
        }
        if self.spectral_tokens > 0 && !self.window_len.is_power_of_two() {
            return bad("window_len", format!("spectral tokens need a power-of-two L, got {}", self.window_len));
        }
        if self.prototype_len != 1 {
            return bad("prototype_len", format!("only 1 is supported, got {}", self.prototype_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
            window_len: self.window_len,
        }
    }

    pub fn signal_len(&self) -> usize {
        self.patch().signal_len()
    }

    pub fn task_len(&self) -> usize {
        1 + self.spectral_tokens
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.signal_len() + self.task_len()
    }

    pub fn flop_shape(&self, batch: usize, channels: usize) -> FlopShape {
        FlopShape {
            batch,
            channels,
            prompt_len: self.prompt_len,
            signal_len: self.signal_len(),
            spectral_tokens: self.spectral_tokens,
            window_len: self.window_len,
            patch_len: self.patch_len,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            joint_attention: self.attention == AttentionKind::Joint,
        }
    }
}

/// Per-dataset adaptation head description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dataset: String,
    pub task: TaskKind,
    pub channels: usize,
    /// Classes (diagnosis) or anchors (prognosis); 0 for unlabeled.
    pub classes: usize,
}

/// Resolves parameter names to tape leaves, once per tape.
///
/// Names in `trainable` become gradient-tracked parameters, all others frozen
/// leaves. `prebound` serves an existing map of vars (used by gradient checks).
pub struct Binder<'a, T: Real> {
    values: Option<&'a BTreeMap<String, Tensor<T>>>,
    trainable: Option<&'a BTreeSet<String>>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(values: &'a BTreeMap<String, Tensor<T>>, trainable: Option<&'a BTreeSet<String>>) -> Self {
        Self {
            values: Some(values),
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn prebound(vars: &BTreeMap<String, Var>) -> Self {
        Self {
            values: None,
            trainable: None,
            bound: vars.clone(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var, ModelError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.values.and_then(|m| m.get(name)).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let var = match self.trainable {
            Some(set) if set.contains(name) => tape.param(name, value)?,
            _ => tape.frozen(name, value)?,
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }
}

/// Model-ready constants for one homogeneous batch.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T: Real> {
    pub batch: usize,
    pub channels: usize,
    /// `[B, l_s, M, P]`.
    pub patches: Tensor<T>,
    /// `[B, M, 2]` rows of `[mu, ln sigma]`.
    pub stats: Tensor<T>,
    /// `[B, n_spec, M, L + 2]`, absent when `n_spec = 0`.
    pub spectra: Option<Tensor<T>>,
    /// Masked-pretraining target `[B * M, P]`.
    pub target: Option<Tensor<T>>,
}

/// Standardizes raw `[L, M]` windows and builds tokenizer inputs.
///
/// With `pretrain`, statistics come from the visible context only (samples
/// before the final patch start), the final patch is kept as the target and
/// every sample from the final patch start on is zeroed, so nothing about the
/// masked patch reaches the inputs.
pub fn prepare_batch<T: Real>(cfg: &ModelConfig, windows: &[&Tensor<f32>], pretrain: bool) -> Result<PreparedBatch<T>, ModelError> {
    let b = windows.len();
    if b == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let m = windows[0].cols();
    let l = cfg.window_len;
    let patch = cfg.patch();
    let ls = patch.signal_len();
    if pretrain && ls < 2 {
        return Err(ModelError::SignalTooShort(ls));
    }
    let visible = (ls - 1) * cfg.stride;
    let stats_rows = if pretrain { visible } else { l };
    let p = cfg.patch_len;

    let mut values = Vec::with_capacity(b * l * m);
    let mut stats = Vec::with_capacity(b * m * 2);
    let mut target = Vec::with_capacity(if pretrain { b * m * p } else { 0 });
    for w in windows {
        if w.shape() != [l, m] {
            return Err(ModelError::Shape(format!("batch windows must all be [{l}, {m}], got {:?}", w.shape())));
        }
        let src = WindowSource {
            dataset: String::new(),
            record: 0,
            offset: 0,
        };
        let sw = SignalWindow::standardize(w, stats_rows, src).map_err(|e| ModelError::Shape(e.to_string()))?;
        for row in tokenizer::stat_features(&sw.mu, &sw.sigma) {
            stats.extend(row.iter().map(|v| T::lit(*v)));
        }
        let data = sw.values.data();
        if pretrain {
            for c in 0..m {
                target.extend((0..p).map(|t| T::lit(data[(visible + t) * m + c] as f64)));
            }
            values.extend(data.iter().enumerate().map(|(i, v)| if i / m >= visible { T::zero() } else { T::lit(*v as f64) }));
        } else {
            values.extend(data.iter().map(|v| T::lit(*v as f64)));
        }
    }
    let values = Tensor::new(&[b, l, m], values)?;
    let patches = tokenizer::patchify_batch(&values, &patch)?;
    let spectra = if cfg.spectral_tokens > 0 {
        Some(tokenizer::spectral_input(&values, cfg.spectral_tokens)?)
    } else {
        None
    };
    Ok(PreparedBatch {
        batch: b,
        channels: m,
        patches,
        stats: Tensor::new(&[b, m, 2], stats)?,
        spectra,
        target: if pretrain { Some(Tensor::new(&[b * m, p], target)?) } else { None },
    })
}

pub fn prompt_name(dataset: &str) -> String {
    format!("E_p.{dataset}")
}

/// Result of the encode path.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub sequence: TokenSequence,
    pub output: Var,
    pub health: Var,
}

/// Tokenizes, assembles and runs the backbone; with `mask_tail` the final
/// signal token is replaced by the mask token before the backbone.
pub fn encode<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, cfg: &ModelConfig, dataset: &str, batch: &PreparedBatch<T>, mask_tail: bool) -> Result<Encoded, ModelError> {
    let (b, m) = (batch.batch, batch.channels);
    tape.set_scope("tokenizer");
    let patches = tape.constant(batch.patches.clone())?;
    let w_e = binder.get(tape, "W_e")?;
    let w_pos = binder.get(tape, "W_pos")?;
    let signal = tokenizer::embed_patches(tape, patches, w_e, w_pos)?;

    let prompt = if cfg.prompt_len > 0 {
        tape.set_scope("prompt");
        let stats = tape.constant(batch.stats.clone())?;
        let e_p = binder.get(tape, &prompt_name(dataset))?;
        let w_stat = binder.get(tape, "W_stat")?;
        Some(tokenizer::prompt_inputs(tape, stats, e_p, w_stat)?)
    } else {
        None
    };

    tape.set_scope("task");
    let spectra = match &batch.spectra {
        Some(s) => Some(tape.constant(s.clone())?),
        None => None,
    };
    let e_cls = binder.get(tape, "e_cls")?;
    let w_f = binder.get(tape, "W_f")?;
    let task = tokenizer::task_inputs(tape, spectra, e_cls, w_f, b, m)?;

    let mut seq = backbone::assemble(tape, prompt, signal, task)?;
    if mask_tail {
        tape.set_scope("mask");
        let mask = binder.get(tape, "mask_embedding")?;
        seq = backbone::mask_signal_tail(tape, &seq, mask, w_pos)?;
    }
    let (output, health) = backbone::forward(tape, binder, cfg, &seq)?;
    Ok(Encoded { sequence: seq, output, health })
}

/// Masked final-patch reconstruction loss: MSE of `G(z)` against the true patch.
pub fn pretrain_loss<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, cfg: &ModelConfig, dataset: &str, batch: &PreparedBatch<T>) -> Result<Var, ModelError> {
    let target = batch.target.clone().ok_or_else(|| ModelError::BadTarget("batch was not prepared for pretraining".into()))?;
    let enc = encode(tape, binder, cfg, dataset, batch, true)?;
    tape.set_scope("decoder");
    let pos = enc.sequence.segments.signal_pos(enc.sequence.segments.signal - 1);
    let z = tape.slice(enc.output, 1, pos, 1)?;
    let z = tape.reshape(z, &[batch.batch * batch.channels, cfg.d_model])?;
    let g_w = binder.get(tape, "G_w")?;
    let pred = tokenizer::decode_patch(tape, z, g_w)?;
    let target = tape.constant(target)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq)?)
}

/// Diagnosis cross-entropy or prognosis MSE from the health token.
pub fn adapt_loss<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, cfg: &ModelConfig, head: &HeadSpec, batch: &PreparedBatch<T>, targets: &[Target]) -> Result<Var, ModelError> {
    if targets.len() != batch.batch {
        return Err(ModelError::BadTarget(format!("{} targets for a batch of {}", targets.len(), batch.batch)));
    }
    let enc = encode(tape, binder, cfg, &head.dataset, batch, false)?;
    tape.set_scope("head");
    match head.task {
        TaskKind::Diagnosis => {
            let labels = targets
                .iter()
                .map(|t| t.class().ok_or_else(|| ModelError::BadTarget(format!("expected a class label, got {t:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let bank = binder.get(tape, &token_space::prototypes_name(&head.dataset))?;
            let sims = token_space::similarity_on(tape, enc.health, bank)?;
            token_space::diagnosis_loss(tape, sims, &labels, cfg.temperature)
        }
        TaskKind::Prognosis => {
            let ruls = targets
                .iter()
                .map(|t| t.rul().map(f64::from).ok_or_else(|| ModelError::BadTarget(format!("expected a RUL target, got {t:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let bank = binder.get(tape, &token_space::prototypes_name(&head.dataset))?;
            let (an, bn) = token_space::rul_names(&head.dataset);
            let a = binder.get(tape, &an)?;
            let b = binder.get(tape, &bn)?;
            let pred = token_space::rul_raw_on(tape, enc.health, bank, a, b)?;
            token_space::prognosis_loss(tape, pred, &ruls)
        }
        TaskKind::Unlabeled => Err(ModelError::TaskMismatch {
            dataset: head.dataset.clone(),
            expected: "diagnosis or prognosis".into(),
            found: "unlabeled".into(),
        }),
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

const EMBED_STD: f64 = 0.02;

/// The full model: configuration, per-dataset heads and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RmGpt {
    pub config: ModelConfig,
    pub heads: BTreeMap<String, HeadSpec>,
    pub store: ParameterStore,
    pub seed: u64,
}

impl RmGpt {
    /// Initializes every shared parameter; each draws from its own seed stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config,
            heads: BTreeMap::new(),
            store: ParameterStore::new(),
            seed,
        };
        let c = model.config.clone();
        let (d, p, l) = (c.d_model, c.patch_len, c.window_len);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        model.init("W_e", &[p, d], lin(p), Partition::Tokenizer)?;
        model.init("W_pos", &[c.max_signal_len, d], EMBED_STD, Partition::Tokenizer)?;
        model.init("W_f", &[l + 2, d], 1.0 / l as f64, Partition::Tokenizer)?;
        model.init("W_stat", &[2, d], lin(2), Partition::Prompt)?;
        model.init("e_cls", &[d], EMBED_STD, Partition::TaskEmbed)?;
        model.init("G_w", &[d, p], lin(d), Partition::Decoder)?;
        model.init("mask_embedding", &[d], EMBED_STD, Partition::Backbone)?;
        for k in 0..c.layers {
            for stage in ["chan", "time"] {
                for w in ["q", "k", "v", "o"] {
                    model.init(&format!("layer{k}.{stage}.{w}"), &[d, d], lin(d), Partition::Backbone)?;
                }
            }
            model.init(&format!("layer{k}.ffn.w1"), &[d, c.d_ff], lin(d), Partition::Backbone)?;
            model.init(&format!("layer{k}.ffn.w2"), &[c.d_ff, d], lin(c.d_ff), Partition::Backbone)?;
            for ln in 1..=3 {
                model.store.insert(&format!("layer{k}.ln{ln}.g"), Tensor::ones(&[d]), Partition::Backbone)?;
                model.store.insert(&format!("layer{k}.ln{ln}.b"), Tensor::zeros(&[d]), Partition::Backbone)?;
            }
        }
        Ok(model)
    }

    fn init(&mut self, name: &str, shape: &[usize], std: f64, partition: Partition) -> Result<(), ModelError> {
        let mut rng = crate::rng::stream(self.seed, &format!("init/{name}"));
        self.store.insert(name, normal(&mut rng, shape, std), partition)
    }

    /// Registers a dataset head, creating its prompt and task parameters.
    ///
    /// A dataset seen before keeps its prompt; a new one starts from the mean
    /// of the existing prompts so it inherits what pretraining learned.
    pub fn add_head(&mut self, spec: HeadSpec) -> Result<(), ModelError> {
        if let Some(existing) = self.heads.get(&spec.dataset) {
            if *existing == spec {
                return Ok(());
            }
            if existing.task != TaskKind::Unlabeled || existing.channels != spec.channels {
                return Err(ModelError::TaskMismatch {
                    dataset: spec.dataset.clone(),
                    expected: format!("{:?} with {} channels", existing.task, existing.channels),
                    found: format!("{:?} with {} channels", spec.task, spec.channels),
                });
            }
        }
        if spec.channels == 0 {
            return Err(ModelError::InvalidConfig {
                field: "channels".into(),
                msg: format!("dataset {} has no channels", spec.dataset),
            });
        }
        let d = self.config.d_model;
        let e_name = prompt_name(&spec.dataset);
        if self.config.prompt_len > 0 && !self.store.contains(&e_name) {
            let shape = [self.config.prompt_len, d];
            let existing: Vec<&Tensor<f32>> = self
                .store
                .iter()
                .filter(|(n, _, p)| *p == Partition::Prompt && n.starts_with("E_p."))
                .map(|(_, v, _)| v)
                .collect();
            let value = if existing.is_empty() {
                normal(&mut crate::rng::stream(self.seed, &format!("init/{e_name}")), &shape, EMBED_STD)
            } else {
                let k = existing.len() as f64;
                Tensor::from_fn(&shape, |i| (existing.iter().map(|t| t.data()[i] as f64).sum::<f64>() / k) as f32)
            };
            self.store.insert(&e_name, value, Partition::Prompt)?;
        }
        if spec.task != TaskKind::Unlabeled {
            if spec.classes < 2 {
                return Err(ModelError::InvalidConfig {
                    field: "classes".into(),
                    msg: format!("dataset {} needs at least 2 classes or anchors", spec.dataset),
                });
            }
            let name = token_space::prototypes_name(&spec.dataset);
            if !self.store.contains(&name) {
                let mut rng = crate::rng::stream(self.seed, &format!("init/{name}"));
                self.store.insert(&name, normal(&mut rng, &[spec.classes, spec.channels, d], EMBED_STD), Partition::FaultBank)?;
            }
        }
        if spec.task == TaskKind::Prognosis {
            let (a, b) = token_space::rul_names(&spec.dataset);
            let init = RulHead::default();
            if !self.store.contains(&a) {
                self.store.insert(&a, Tensor::scalar(init.a as f32), Partition::RulHead)?;
                self.store.insert(&b, Tensor::scalar(init.b as f32), Partition::RulHead)?;
            }
        }
        self.heads.insert(spec.dataset.clone(), spec);
        Ok(())
    }

    pub fn head(&self, dataset: &str) -> Result<&HeadSpec, ModelError> {
        self.heads.get(dataset).ok_or_else(|| ModelError::UnknownDataset(dataset.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>, ModelError> {
        self.store.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn rul_head(&self, dataset: &str) -> Result<RulHead, ModelError> {
        let (a, b) = token_space::rul_names(dataset);
        Ok(RulHead {
            a: self.param(&a)?.data()[0] as f64,
            b: self.param(&b)?.data()[0] as f64,
        })
    }

    /// Inference forward of one batch, returning health tokens `[B, M, d]` and the tape's flop report.
    pub fn forward_batch(&self, dataset: &str, windows: &[&Tensor<f32>]) -> Result<(Tensor<f32>, FlopReport), ModelError> {
        self.head(dataset)?;
        let prepared = prepare_batch::<f32>(&self.config, windows, false)?;
        let mut tape = Tape::<f32>::inference();
        let mut binder = Binder::new(self.store.values(), None);
        let enc = encode(&mut tape, &mut binder, &self.config, dataset, &prepared, false)?;
        Ok((tape.value(enc.health).clone(), tape.flops().clone()))
    }

    /// Health tokens `[M, d]` per window, computed in parallel chunks with ordered output.
    pub fn health_tokens(&self, dataset: &str, windows: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Tensor<f32>>, ModelError> {
        let chunks: Vec<&[&Tensor<f32>]> = windows.chunks(batch_size.max(1)).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| {
                let (h, _) = self.forward_batch(dataset, chunk)?;
                let [b, m, d] = h.shape()[..] else { unreachable!("health is rank 3") };
                (0..b).map(|i| Ok(h.slice_axis(0, i, 1)?.reshape(&[m, d])?)).collect::<Result<Vec<_>, ModelError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn diagnose(&self, dataset: &str, windows: &[&Tensor<f32>]) -> Result<Vec<usize>, ModelError> {
        self.expect_task(dataset, TaskKind::Diagnosis)?;
        let bank = self.param(&token_space::prototypes_name(dataset))?;
        self.health_tokens(dataset, windows, 32)?.iter().map(|h| token_space::diagnose(h, bank)).collect()
    }

    pub fn predict_rul(&self, dataset: &str, windows: &[&Tensor<f32>]) -> Result<Vec<f64>, ModelError> {
        self.expect_task(dataset, TaskKind::Prognosis)?;
        let bank = self.param(&token_space::prototypes_name(dataset))?;
        let head = self.rul_head(dataset)?;
        self.health_tokens(dataset, windows, 32)?.iter().map(|h| token_space::predict_rul(h, bank, &head)).collect()
    }

    pub fn expect_task(&self, dataset: &str, task: TaskKind) -> Result<&HeadSpec, ModelError> {
        let head = self.head(dataset)?;
        if head.task != task {
            return Err(ModelError::TaskMismatch {
                dataset: dataset.to_string(),
                expected: format!("{task:?}").to_lowercase(),
                found: format!("{:?}", head.task).to_lowercase(),
            });
        }
        Ok(head)
    }
}
