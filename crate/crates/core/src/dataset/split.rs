use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, TaskKind};
use super::DataError;

/// Record indices on each side of a split, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(manifest: &DatasetManifest) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.label.unwrap_or(0)).or_default().push(i);
    }
    groups
}

/// Takes exactly `k` records per class for training; everything else is test.
///
/// Every class needs at least `k + 1` records so the test side covers it too.
pub fn few_shot_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Split, DataError> {
    if manifest.task != TaskKind::Diagnosis {
        return Err(DataError::Invalid {
            field: "task".into(),
            record: None,
            msg: "few-shot splits need a diagnosis dataset".into(),
        });
    }
    if k == 0 {
        return Err(DataError::Invalid {
            field: "k".into(),
            record: None,
            msg: "k must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = by_class(manifest);
    let mut split = Split { train: Vec::new(), test: Vec::new() };
    for class in 0..manifest.num_classes() {
        let mut members = groups.get(&class).cloned().unwrap_or_default();
        if members.len() <= k {
            return Err(DataError::InsufficientClass {
                class,
                have: members.len(),
                need: k + 1,
            });
        }
        members.shuffle(&mut rng);
        split.train.extend_from_slice(&members[..k]);
        split.test.extend_from_slice(&members[k..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Holds out roughly `test_fraction` of the data.
///
/// Diagnosis splits are stratified by class. Records sharing a
/// `condition_tag` in a prognosis dataset (one run-to-failure trajectory)
/// always land on the same side.
pub fn holdout_split(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Invalid {
            field: "test_fraction".into(),
            record: None,
            msg: format!("{test_fraction} outside [0, 1)"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match manifest.task {
        TaskKind::Diagnosis => by_class(manifest).into_values().collect(),
        _ => vec![(0..manifest.records.len()).collect()],
    };
    let mut split = Split { train: Vec::new(), test: Vec::new() };
    for members in groups {
        // Bundle records into units that must not be separated.
        let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for &i in &members {
            let key = match (manifest.task, &manifest.records[i].condition_tag) {
                (TaskKind::Prognosis, Some(tag)) => tag.clone(),
                _ => format!("#{i}"),
            };
            units.entry(key).or_default().push(i);
        }
        let mut units: Vec<Vec<usize>> = units.into_values().collect();
        units.shuffle(&mut rng);
        let n_test = ((units.len() as f64) * test_fraction).round() as usize;
        let n_test = if test_fraction > 0.0 { n_test.clamp(1, units.len().saturating_sub(1).max(1)) } else { 0 };
        for (u, unit) in units.into_iter().enumerate() {
            if u < n_test {
                split.test.extend(unit);
            } else {
                split.train.extend(unit);
            }
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
