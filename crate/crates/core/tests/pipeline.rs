use std::path::Path;

use proptest::prelude::*;

use rmgpt_core::config::RunConfig;
use rmgpt_core::dataset::{generate_synthetic, holdout_split, load_manifest, SynthMode, SyntheticSpec, TaskKind, Target, WindowSet};
use rmgpt_core::eval::evaluate;
use rmgpt_core::model::{ModelConfig, RmGpt};
use rmgpt_core::training::{checkpoint, run_phase, TrainConfig, TrainMode};

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::preset("desk").unwrap();
    run.model = ModelConfig { d_model: 16, heads: 2, d_ff: 32, layers: 1, ..ModelConfig::desk() };
    run.train = TrainConfig { pretrain_epochs: 1, prompt_epochs: 2, batch_size: 8, ..TrainConfig::desk() };
    run
}

fn unlabeled(mut set: WindowSet) -> WindowSet {
    set.task = TaskKind::Unlabeled;
    set.classes = 0;
    set.windows.iter_mut().for_each(|w| w.target = Target::Unlabeled);
    set
}

#[test]
fn synth_to_disk_then_train_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run();
    let spec = SyntheticSpec { name: "disk".into(), seed: 3, ..Default::default() };
    let data = generate_synthetic(&spec, 4).unwrap();
    data.write_to(dir.path()).unwrap();

    let manifest = load_manifest(&dir.path().join("manifest.toml")).unwrap();
    let from_disk = WindowSet::load(&manifest, &run.window()).unwrap();
    let in_memory = WindowSet::from_payloads(&data.manifest, &data.payloads, &run.window()).unwrap();
    assert_eq!(from_disk.len(), in_memory.len());
    assert_eq!(from_disk.windows[5].raw, in_memory.windows[5].raw);

    let mut model = RmGpt::new(run.model.clone(), 0).unwrap();
    let pre = run_phase(&mut model, &[&unlabeled(from_disk.clone())], &run.train, TrainMode::Pretrain, &run.hash()).unwrap();
    assert_eq!(pre.epochs.len(), 1);
    assert!(pre.epochs[0].mean_loss.is_finite());

    let split = holdout_split(&manifest, 0.25, 0).unwrap();
    let log = run_phase(&mut model, &[&from_disk.subset(&split.train)], &run.train, TrainMode::Prompt, &run.hash()).unwrap();
    assert!(log.trainable_params < log.total_params);
    let report = evaluate(&model, &from_disk.subset(&split.test)).unwrap();
    let acc = report.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report.mae.is_none());
}

#[test]
fn checkpoint_survives_disk_and_keeps_heads() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run();
    let spec = SyntheticSpec { name: "life".into(), mode: SynthMode::Prognosis, life_steps: 6, seed: 1, ..Default::default() };
    let data = generate_synthetic(&spec, 2).unwrap();
    let set = WindowSet::from_payloads(&data.manifest, &data.payloads, &run.window()).unwrap();
    let mut model = RmGpt::new(run.model.clone(), 2).unwrap();
    run_phase(&mut model, &[&set], &run.train, TrainMode::Prompt, "").unwrap();

    let path = dir.path().join("m.ckpt");
    let hash = checkpoint::save(&model, &path).unwrap();
    assert_eq!(hash, checkpoint::file_hash(&path).unwrap());
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(evaluate(&back, &set).unwrap().mae, evaluate(&model, &set).unwrap().mae);
}

#[test]
fn truncated_or_padded_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = RmGpt::new(tiny_run().model, 0).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::load(&path).is_err());
    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&path, &padded).unwrap();
    assert!(checkpoint::load(&path).is_err());
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert!(checkpoint::load(&path).is_err());
    assert!(checkpoint::load(Path::new("/nonexistent/x.ckpt")).is_err());
}

#[test]
fn preset_files_match_builtin_presets() {
    for name in ["desk", "paper"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(format!("{name}.cfg"));
        let from_file = RunConfig::load(&path, "desk").unwrap();
        assert_eq!(from_file, RunConfig::preset(name).unwrap(), "{name}");
        from_file.validate(false).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn holdout_never_splits_a_life(lives in 2usize..8, steps in 2usize..6, frac in 0.1f64..0.6, seed in 0u64..1000) {
        let spec = SyntheticSpec { name: "p".into(), mode: SynthMode::Prognosis, life_steps: steps, seed: 0, record_len: 256, ..Default::default() };
        let data = generate_synthetic(&spec, lives).unwrap();
        let split = holdout_split(&data.manifest, frac, seed).unwrap();
        let tag = |i: &usize| data.manifest.records[*i].condition_tag.clone();
        let train: std::collections::BTreeSet<_> = split.train.iter().map(tag).collect();
        let test: std::collections::BTreeSet<_> = split.test.iter().map(tag).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert!(!test.is_empty() && !train.is_empty());
        prop_assert_eq!(split.train.len() + split.test.len(), lives * steps);
    }
}
