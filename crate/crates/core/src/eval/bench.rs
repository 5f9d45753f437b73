//! Efficiency reports: counted flops, measured latency and parameter counts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{TaskKind, Target};
use crate::error::ModelError;
use crate::model::{self, AttentionKind, Binder, HeadSpec, ModelConfig, RmGpt};
use crate::numeric::{count_flops, FlopReport, Tape, Tensor};
use crate::training::TrainMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

/// The published configuration and its two ablations.
pub fn standard_variants(base: &ModelConfig) -> Vec<Variant> {
    vec![
        Variant {
            name: "orig".into(),
            config: base.clone(),
        },
        Variant {
            name: "without_patch".into(),
            config: ModelConfig {
                patch_len: 1,
                stride: 1,
                max_signal_len: base.max_signal_len.max(base.window_len),
                ..base.clone()
            },
        },
        Variant {
            name: "without_tc_attention".into(),
            config: ModelConfig {
                attention: AttentionKind::Joint,
                ..base.clone()
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub repeats: usize,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub variant: String,
    pub channels: usize,
    pub flops: FlopReport,
    pub total_params: usize,
    pub prompt_trainable: usize,
    pub finetune_trainable: usize,
    pub prompt_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backward_prompt: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backward_finetune: Option<Timing>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSet {
    pub reports: Vec<EfficiencyReport>,
}

impl BenchSet {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("bench serializes")
    }

    pub fn get(&self, variant: &str) -> Option<&EfficiencyReport> {
        self.reports.iter().find(|r| r.variant == variant)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<(), ModelError>) -> Result<Timing, ModelError> {
    f()?;
    let mut xs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        xs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing { repeats, median_ms: median(xs) })
}

fn probe_window(cfg: &ModelConfig, channels: usize) -> Tensor<f32> {
    Tensor::from_fn(&[cfg.window_len, channels], |i| ((i as f32) * 0.37).sin() + 0.1 * ((i % 7) as f32))
}

/// Counts flops and parameters for every variant; when `repeats > 0` also
/// measures single-window latency and one backward pass per adaptation mode.
pub fn bench_efficiency(variants: &[Variant], head: &HeadSpec, repeats: usize, seed: u64) -> Result<BenchSet, ModelError> {
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let inference = ModelConfig { dropout: 0.0, ..v.config.clone() };
        let mut m = RmGpt::new(inference.clone(), seed)?;
        m.add_head(head.clone())?;
        let flops = count_flops(&inference.flop_shape(1, head.channels));
        let total = m.store.total_count();
        let prompt = m.store.trainable_count(TrainMode::Prompt);
        let finetune = m.store.trainable_count(TrainMode::Finetune);
        let (mut latency, mut bp, mut bf) = (None, None, None);
        if repeats > 0 {
            let w = probe_window(&inference, head.channels);
            latency = Some(time_ms(repeats, || {
                let (_, counted) = m.forward_batch(&head.dataset, &[&w])?;
                debug_assert_eq!(counted, flops);
                Ok(())
            })?);
            if head.task != TaskKind::Unlabeled {
                let target = match head.task {
                    TaskKind::Diagnosis => Target::Class(0),
                    _ => Target::Rul(0.5),
                };
                let batch = model::prepare_batch::<f32>(&inference, &[&w], false)?;
                let backward = |mode: TrainMode| {
                    let names = m.store.trainable_names(mode);
                    let mut tape = Tape::<f32>::new();
                    let mut binder = Binder::new(m.store.values(), Some(&names));
                    let loss = model::adapt_loss(&mut tape, &mut binder, &inference, head, &batch, &[target])?;
                    let mut xs = Vec::with_capacity(repeats);
                    tape.backward(loss)?;
                    for _ in 0..repeats {
                        let t = Instant::now();
                        tape.backward(loss)?;
                        xs.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                    Ok::<_, ModelError>(Timing { repeats, median_ms: median(xs) })
                };
                bp = Some(backward(TrainMode::Prompt)?);
                bf = Some(backward(TrainMode::Finetune)?);
            }
        }
        reports.push(EfficiencyReport {
            variant: v.name.clone(),
            channels: head.channels,
            flops,
            total_params: total,
            prompt_trainable: prompt,
            finetune_trainable: finetune,
            prompt_fraction: prompt as f64 / total as f64,
            latency,
            backward_prompt: bp,
            backward_finetune: bf,
        });
    }
    Ok(BenchSet { reports })
}
