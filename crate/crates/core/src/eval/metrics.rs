use serde::{Deserialize, Serialize};

use crate::dataset::TaskKind;
use crate::error::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub task: TaskKind,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// `confusion[true][predicted]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl MetricReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

pub fn diagnosis_report(dataset: &str, predicted: &[usize], labels: &[usize], classes: usize) -> Result<MetricReport, ModelError> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(ModelError::BadTarget(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(ModelError::BadTarget(format!("class {} outside {classes} classes", p.max(y))));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(MetricReport {
        dataset: dataset.to_string(),
        task: TaskKind::Diagnosis,
        samples: labels.len(),
        accuracy: Some(correct as f64 / labels.len() as f64),
        mae: None,
        mse: None,
        confusion: Some(confusion),
    })
}

/// MAE and MSE; errors are summed in sorted order so the result does not depend on sample order.
pub fn prognosis_report(dataset: &str, predicted: &[f64], targets: &[f64]) -> Result<MetricReport, ModelError> {
    if predicted.len() != targets.len() || targets.is_empty() {
        return Err(ModelError::BadTarget(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    let mut abs: Vec<f64> = predicted.iter().zip(targets).map(|(p, y)| (p - y).abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    Ok(MetricReport {
        dataset: dataset.to_string(),
        task: TaskKind::Prognosis,
        samples: abs.len(),
        accuracy: None,
        mae: Some(abs.iter().sum::<f64>() / n),
        mse: Some(abs.iter().map(|e| e * e).sum::<f64>() / n),
        confusion: None,
    })
}
