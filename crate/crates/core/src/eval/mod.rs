//! Metrics, the few-shot protocol, efficiency benchmarks and embedding export.

pub mod bench;
pub mod export;
pub mod metrics;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use bench::{bench_efficiency, standard_variants, BenchSet, EfficiencyReport, Timing, Variant};
pub use export::{export_embeddings, health_points, read_embeddings, separation_ratio, standardized_points, ExportSummary, Pca2};
pub use metrics::{diagnosis_report, prognosis_report, MetricReport};

use crate::dataset::{few_shot_split, DatasetManifest, TaskKind, WindowSet};
use crate::error::{Error, ModelError};
use crate::model::RmGpt;
use crate::numeric::Tensor;
use crate::training::{run_phase, TrainConfig, TrainMode};

/// Scores every window of `set` with the model's head for that dataset.
pub fn evaluate(model: &RmGpt, set: &WindowSet) -> Result<MetricReport, ModelError> {
    let windows: Vec<&Tensor<f32>> = set.windows.iter().map(|w| &w.raw).collect();
    match set.task {
        TaskKind::Diagnosis => {
            let head = model.expect_task(&set.dataset, TaskKind::Diagnosis)?;
            let labels = set
                .windows
                .iter()
                .map(|w| w.target.class().ok_or_else(|| ModelError::BadTarget(format!("window {:?} has no label", w.source))))
                .collect::<Result<Vec<_>, _>>()?;
            let predicted = model.diagnose(&set.dataset, &windows)?;
            diagnosis_report(&set.dataset, &predicted, &labels, head.classes)
        }
        TaskKind::Prognosis => {
            let targets = set
                .windows
                .iter()
                .map(|w| w.target.rul().map(f64::from).ok_or_else(|| ModelError::BadTarget(format!("window {:?} has no RUL", w.source))))
                .collect::<Result<Vec<_>, _>>()?;
            let predicted = model.predict_rul(&set.dataset, &windows)?;
            prognosis_report(&set.dataset, &predicted, &targets)
        }
        TaskKind::Unlabeled => Err(ModelError::TaskMismatch {
            dataset: set.dataset.clone(),
            expected: "diagnosis or prognosis".into(),
            found: "unlabeled".into(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub k: usize,
    pub train_samples: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTable {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<FewShotRow>,
}

impl FewShotTable {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    /// Adjacent pairs where the mean accuracy drops by more than `slack`.
    pub fn inversions(&self, slack: f64) -> usize {
        self.means().windows(2).filter(|w| w[1] + slack < w[0]).count()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("table serializes")
    }
}

/// For each `k` and seed: split, prompt-adapt a copy of `pretrained` on the
/// `k`-shot training records, and score the remaining records.
///
/// `train.seed` is replaced by each run's seed.
pub fn few_shot_eval(pretrained: &RmGpt, manifest: &DatasetManifest, set: &WindowSet, ks: &[usize], seeds: &[u64], train: &TrainConfig) -> Result<FewShotTable, Error> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut accuracies = Vec::with_capacity(seeds.len());
        let mut train_samples = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let split = few_shot_split(manifest, k, seed)?;
            let a: BTreeSet<usize> = split.train.iter().copied().collect();
            if split.test.iter().any(|r| a.contains(r)) {
                return Err(ModelError::BadTarget(format!("few-shot split for k={k}, seed={seed} is not disjoint")).into());
            }
            let train_set = set.subset(&split.train);
            let test_set = set.subset(&split.test);
            let mut model = pretrained.clone();
            let cfg = TrainConfig { seed, ..train.clone() };
            run_phase(&mut model, &[&train_set], &cfg, TrainMode::Prompt, "")?;
            let report = evaluate(&model, &test_set)?;
            train_samples.push(train_set.len());
            accuracies.push(report.accuracy.unwrap_or(0.0));
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        rows.push(FewShotRow {
            k,
            train_samples,
            accuracies,
            mean,
            std,
        });
    }
    Ok(FewShotTable {
        dataset: set.dataset.clone(),
        seeds: seeds.to_vec(),
        rows,
    })
}
