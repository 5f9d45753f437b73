use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{TaskKind, Target, WindowSet};
use crate::error::ModelError;
use crate::model::{self, Binder, HeadSpec, RmGpt};
use crate::numeric::{Tape, Tensor};
use crate::rng;
use crate::training::optim::{AdamConfig, AdamW};
use crate::training::params::{Partition, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size for prompt-mode phases; falls back to `learning_rate` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_learning_rate: Option<f64>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub prompt_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            prompt_learning_rate: Some(1e-2),
            pretrain_epochs: 20,
            finetune_epochs: 10,
            prompt_epochs: 40,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every_epoch: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 3e-7,
            prompt_learning_rate: None,
            pretrain_epochs: 20,
            finetune_epochs: 3,
            prompt_epochs: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: &str| Err(ModelError::InvalidConfig { field: field.into(), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if let Some(lr) = self.prompt_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("prompt_learning_rate", "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps", "eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn epochs(&self, mode: TrainMode) -> usize {
        match mode {
            TrainMode::Pretrain => self.pretrain_epochs,
            TrainMode::Prompt => self.prompt_epochs,
            TrainMode::Finetune => self.finetune_epochs,
        }
    }

    pub fn learning_rate(&self, mode: TrainMode) -> f64 {
        match mode {
            TrainMode::Prompt => self.prompt_learning_rate.unwrap_or(self.learning_rate),
            _ => self.learning_rate,
        }
    }

    pub fn adam(&self, mode: TrainMode) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate(mode),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub dataset: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: TrainMode,
    pub seed: u64,
    pub config_hash: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub wall_seconds: f64,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params as f64
    }
}

/// Drives optimization of one model in one mode.
pub struct Trainer<'m> {
    pub model: &'m mut RmGpt,
    pub mode: TrainMode,
    seed: u64,
    optimizer: AdamW,
    trainable: BTreeSet<String>,
    step: usize,
}

impl<'m> Trainer<'m> {
    /// Heads must already be registered; the trainable set is fixed here.
    pub fn new(model: &'m mut RmGpt, mode: TrainMode, cfg: &TrainConfig) -> Self {
        let trainable = model.store.trainable_names(mode);
        Self {
            model,
            mode,
            seed: cfg.seed,
            optimizer: AdamW::new(cfg.adam(mode)),
            trainable,
            step: 0,
        }
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    fn tape(&self) -> Tape<f32> {
        let label = format!("dropout/{}/{}", self.mode, self.step);
        Tape::new().with_dropout(rng::stream(self.seed, &label))
    }

    fn apply(&mut self, tape: &Tape<f32>, loss: crate::numeric::Var) -> Result<f64, ModelError> {
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(ModelError::Diverged { step: self.step, value });
        }
        let grads = tape.backward(loss)?;
        self.optimizer.update(&mut self.model.store, &grads, &self.trainable)?;
        self.step += 1;
        Ok(value)
    }

    /// One masked-reconstruction step on windows of a single dataset.
    pub fn pretrain_step(&mut self, dataset: &str, windows: &[&Tensor<f32>]) -> Result<f64, ModelError> {
        self.model.head(dataset)?;
        let batch = model::prepare_batch::<f32>(&self.model.config, windows, true)?;
        let mut tape = self.tape();
        let values = self.model.store.values();
        let mut binder = Binder::new(values, Some(&self.trainable));
        let loss = model::pretrain_loss(&mut tape, &mut binder, &self.model.config, dataset, &batch)?;
        drop(binder);
        self.apply(&tape, loss)
    }

    /// One supervised step; the update touches only this mode's trainable partitions.
    pub fn adapt_step(&mut self, dataset: &str, windows: &[&Tensor<f32>], targets: &[Target]) -> Result<f64, ModelError> {
        let head = self.model.head(dataset)?.clone();
        let batch = model::prepare_batch::<f32>(&self.model.config, windows, false)?;
        let mut tape = self.tape();
        let values = self.model.store.values();
        let mut binder = Binder::new(values, Some(&self.trainable));
        let loss = model::adapt_loss(&mut tape, &mut binder, &self.model.config, &head, &batch, targets)?;
        drop(binder);
        self.apply(&tape, loss)
    }
}

/// Registers each set's head for `mode`.
pub fn register_heads(model: &mut RmGpt, sets: &[&WindowSet], mode: TrainMode) -> Result<(), ModelError> {
    for set in sets {
        let task = if mode == TrainMode::Pretrain {
            match model.heads.get(&set.dataset) {
                Some(h) => h.task,
                None => TaskKind::Unlabeled,
            }
        } else {
            set.task
        };
        model.add_head(HeadSpec {
            dataset: set.dataset.clone(),
            task,
            channels: set.channels,
            classes: if task == TaskKind::Unlabeled { 0 } else { set.classes },
        })?;
    }
    Ok(())
}

/// Epoch batches: per-dataset shuffled queues interleaved round-robin, one dataset per batch.
pub fn epoch_batches(sets: &[&WindowSet], batch_size: usize, seed: u64, label: &str) -> Vec<(usize, Vec<usize>)> {
    let mut queues: Vec<Vec<Vec<usize>>> = sets
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rng::stream(seed, &format!("{label}/{}", s.dataset)));
            idx.chunks(batch_size).map(|c| c.to_vec()).collect()
        })
        .collect();
    for q in &mut queues {
        q.reverse();
    }
    let mut out = Vec::new();
    loop {
        let mut any = false;
        for (d, q) in queues.iter_mut().enumerate() {
            if let Some(b) = q.pop() {
                out.push((d, b));
                any = true;
            }
        }
        if !any {
            return out;
        }
    }
}

/// Runs `epochs(mode)` epochs over all sets.
///
/// In prompt mode the frozen partitions are checksummed before and after; a
/// difference is reported as an error rather than silently returned.
pub fn run_phase(model: &mut RmGpt, sets: &[&WindowSet], cfg: &TrainConfig, mode: TrainMode, config_hash: &str) -> Result<RunLog, ModelError> {
    run_phase_with(model, sets, cfg, mode, config_hash, |_, _| Ok(()))
}

/// As [`run_phase`], calling `on_epoch(model, epoch)` after every epoch.
pub fn run_phase_with(
    model: &mut RmGpt,
    sets: &[&WindowSet],
    cfg: &TrainConfig,
    mode: TrainMode,
    config_hash: &str,
    mut on_epoch: impl FnMut(&RmGpt, usize) -> Result<(), ModelError>,
) -> Result<RunLog, ModelError> {
    cfg.validate()?;
    if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(ModelError::BadTarget("training needs at least one non-empty dataset".into()));
    }
    register_heads(model, sets, mode)?;
    let frozen = |p: Partition| !mode.trains(p);
    let before = model.store.checksums(frozen);
    let start = Instant::now();
    let total_params = model.store.total_count();
    let trainable_params = model.store.trainable_count(mode);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    {
        let mut trainer = Trainer::new(model, mode, cfg);
        for epoch in 0..cfg.epochs(mode) {
            let t0 = Instant::now();
            let batches = epoch_batches(sets, cfg.batch_size, cfg.seed, &format!("shuffle/{mode}/{epoch}"));
            let mut sum = 0.0;
            for (d, idx) in &batches {
                let set = sets[*d];
                let windows: Vec<&Tensor<f32>> = idx.iter().map(|&i| &set.windows[i].raw).collect();
                let loss = match mode {
                    TrainMode::Pretrain => trainer.pretrain_step(&set.dataset, &windows)?,
                    _ => {
                        let targets: Vec<Target> = idx.iter().map(|&i| set.windows[i].target).collect();
                        trainer.adapt_step(&set.dataset, &windows, &targets)?
                    }
                };
                sum += loss;
                steps.push(StepLog {
                    epoch,
                    dataset: set.dataset.clone(),
                    loss,
                });
            }
            epochs.push(EpochLog {
                epoch,
                mean_loss: sum / batches.len().max(1) as f64,
                seconds: t0.elapsed().as_secs_f64(),
            });
            on_epoch(trainer.model, epoch)?;
        }
    }
    let after = model.store.checksums(frozen);
    if before != after {
        let changed: Vec<&String> = before.iter().filter(|(k, v)| after.get(*k) != Some(v)).map(|(k, _)| k).collect();
        return Err(ModelError::InvalidConfig {
            field: "partition".into(),
            msg: format!("frozen parameters changed during {mode} phase: {changed:?}"),
        });
    }
    Ok(RunLog {
        mode,
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        total_params,
        trainable_params,
        steps,
        epochs,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Checksums of every parameter, grouped by partition.
pub fn partition_checksums(model: &RmGpt) -> BTreeMap<Partition, BTreeMap<String, String>> {
    Partition::ALL.iter().map(|&p| (p, model.store.checksums(|q| q == p))).collect()
}
