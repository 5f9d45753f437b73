use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rmgpt_core::config::{check_compatible, RunConfig};
use rmgpt_core::dataset::{self, generate_synthetic, holdout_split, load_manifest, DatasetManifest, SynthMode, SyntheticSpec, TaskKind, Target, WindowSet};
use rmgpt_core::eval::{self, bench_efficiency, export_embeddings, few_shot_eval, standard_variants, FewShotTable, MetricReport};
use rmgpt_core::model::{HeadSpec, RmGpt};
use rmgpt_core::training::{checkpoint, run_phase, EpochLog, RunLog, TrainMode};

use crate::{CliError, Common, SynthKind};

/// Fraction of records held out by `adapt` and scored by `eval`.
const TEST_FRACTION: f64 = 0.2;

#[derive(Serialize, Default)]
struct Summary {
    command: String,
    seed: u64,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_params: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trainable_params: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trainable_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    epochs: Vec<EpochLog>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    metrics: Vec<MetricReport>,
}

impl Summary {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            ..Default::default()
        }
    }

    fn with_log(mut self, log: &RunLog) -> Self {
        self.mode = Some(log.mode.to_string());
        self.total_params = Some(log.total_params);
        self.trainable_params = Some(log.trainable_params);
        self.trainable_fraction = Some(log.trainable_params as f64 / log.total_params as f64);
        self.wall_seconds = Some(log.wall_seconds);
        self.epochs = log.epochs.clone();
        self
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p, &common.preset)?,
        None => RunConfig::preset(&common.preset)?,
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.run_dir = o.clone();
    }
    cfg.validate(true)?;
    Ok(cfg)
}

/// Creates the run directory and echoes the resolved config into it.
fn start_run(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output.run_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    println!("config hash {}", cfg.hash());
    Ok(dir)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), CliError> {
    std::fs::write(dir.join("summary.toml"), toml::to_string(summary)?)?;
    println!("summary written to {}", dir.join("summary.toml").display());
    Ok(())
}

fn manifests(cfg: &RunConfig) -> Result<Vec<DatasetManifest>, CliError> {
    if cfg.data.manifests.is_empty() {
        return Err(CliError::Config("invalid config key `data.manifests`: at least one manifest is required".into()));
    }
    Ok(cfg.data.manifests.iter().map(|p| load_manifest(p)).collect::<Result<_, _>>()?)
}

fn load_sets(cfg: &RunConfig, labeled_only: bool) -> Result<Vec<(DatasetManifest, WindowSet)>, CliError> {
    let mut out = Vec::new();
    for m in manifests(cfg)? {
        if labeled_only && m.task == TaskKind::Unlabeled {
            continue;
        }
        let set = WindowSet::load(&m, &cfg.window())?;
        out.push((m, set));
    }
    if out.is_empty() {
        return Err(CliError::Config("invalid config key `data.manifests`: no labeled manifest configured".into()));
    }
    Ok(out)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<RmGpt, CliError> {
    let model = checkpoint::load(path)?;
    check_compatible(&cfg.model, &model.config)?;
    Ok(model)
}

fn save_checkpoint(dir: &Path, model: &RmGpt, summary: &mut Summary) -> Result<(), CliError> {
    let path = dir.join("model.ckpt");
    let hash = checkpoint::save(model, &path)?;
    println!("checkpoint {} sha256 {hash}", path.display());
    summary.checkpoint = Some(path);
    summary.checkpoint_sha256 = Some(hash);
    Ok(())
}

fn print_report(r: &MetricReport) {
    match (r.accuracy, r.mae) {
        (Some(acc), _) => println!("{}: accuracy {acc:.4} on {} windows", r.dataset, r.samples),
        (_, Some(mae)) => println!("{}: mae {mae:.4} mse {:.4} on {} windows", r.dataset, r.mse.unwrap_or(f64::NAN), r.samples),
        _ => {}
    }
}

pub fn data_synth(out: &Path, kind: SynthKind, n: usize, seed: u64, name: &str, channels: usize, life_steps: usize) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        name: name.to_string(),
        mode: match kind {
            SynthKind::Diagnosis => SynthMode::Diagnosis,
            SynthKind::Prognosis => SynthMode::Prognosis,
        },
        channels,
        life_steps,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec, n).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = data.write_to(out)?;
    println!("wrote {} records to {}", manifest.records.len(), out.join("manifest.toml").display());
    Ok(())
}

pub fn data_inspect(path: &Path, config: Option<&Path>, preset: &str) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset)?,
    };
    let m = load_manifest(path)?;
    println!("name {}", m.name);
    println!("task {:?}", m.task);
    println!("channels {}", m.channels);
    println!("sample_rate_hz {}", m.sample_rate_hz);
    println!("records {}", m.records.len());
    match m.task {
        TaskKind::Diagnosis => {
            let mut counts = vec![0usize; m.num_classes()];
            for r in &m.records {
                counts[r.label.unwrap_or(0)] += 1;
            }
            for (name, c) in m.class_names.iter().zip(counts) {
                println!("  {name}: {c}");
            }
        }
        TaskKind::Prognosis => println!("anchors {}", m.num_classes()),
        TaskKind::Unlabeled => {}
    }
    let set = WindowSet::load(&m, &cfg.window())?;
    println!("windows {} (L={}, hop={}, {} Hz)", set.len(), cfg.model.window_len, cfg.data.hop, cfg.data.target_hz);
    Ok(())
}

#[derive(Serialize)]
struct SplitFile {
    manifest: PathBuf,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn data_split(path: &Path, k: Option<usize>, test_fraction: f64, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let m = load_manifest(path)?;
    let split = match k {
        Some(k) => dataset::few_shot_split(&m, k, seed)?,
        None => holdout_split(&m, test_fraction, seed)?,
    };
    let text = toml::to_string(&SplitFile {
        manifest: path.to_path_buf(),
        seed,
        k,
        train: split.train,
        test: split.test,
    })?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn pretrain(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let sets: Vec<WindowSet> = load_sets(&cfg, false)?
        .into_iter()
        .map(|(_, mut s)| {
            s.task = TaskKind::Unlabeled;
            s.classes = 0;
            s.windows.iter_mut().for_each(|w| w.target = Target::Unlabeled);
            s
        })
        .collect();
    let dir = start_run(&cfg)?;
    let mut model = RmGpt::new(cfg.model.clone(), cfg.train.seed)?;
    let refs: Vec<&WindowSet> = sets.iter().collect();
    let log = run_phase(&mut model, &refs, &cfg.train, TrainMode::Pretrain, &cfg.hash())?;
    for e in &log.epochs {
        println!("epoch {:>3} loss {:.5}", e.epoch, e.mean_loss);
    }
    let mut summary = Summary::new("pretrain", &cfg).with_log(&log);
    save_checkpoint(&dir, &model, &mut summary)?;
    write_summary(&dir, &summary)
}

pub fn adapt(common: &Common, ckpt: &Path, mode: TrainMode) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let mut model = load_checkpoint(&cfg, ckpt)?;
    let loaded = load_sets(&cfg, true)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (m, set) in &loaded {
        let split = holdout_split(m, TEST_FRACTION, cfg.train.seed)?;
        train.push(set.subset(&split.train));
        test.push(set.subset(&split.test));
    }
    let dir = start_run(&cfg)?;
    let refs: Vec<&WindowSet> = train.iter().collect();
    let log = run_phase(&mut model, &refs, &cfg.train, mode, &cfg.hash())?;
    for e in &log.epochs {
        println!("epoch {:>3} loss {:.5}", e.epoch, e.mean_loss);
    }
    println!("trainable {} of {} parameters ({:.3}%)", log.trainable_params, log.total_params, 100.0 * log.trainable_params as f64 / log.total_params as f64);
    let mut summary = Summary::new("adapt", &cfg).with_log(&log);
    summary.source_checkpoint = Some(ckpt.to_path_buf());
    for set in &test {
        let r = eval::evaluate(&model, set)?;
        print_report(&r);
        summary.metrics.push(r);
    }
    save_checkpoint(&dir, &model, &mut summary)?;
    write_summary(&dir, &summary)
}

pub fn eval(common: &Common, ckpt: &Path, all: bool) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let model = load_checkpoint(&cfg, ckpt)?;
    let dir = start_run(&cfg)?;
    let mut summary = Summary::new("eval", &cfg);
    summary.source_checkpoint = Some(ckpt.to_path_buf());
    for (m, set) in load_sets(&cfg, true)? {
        let set = if all { set } else { set.subset(&holdout_split(&m, TEST_FRACTION, cfg.train.seed)?.test) };
        let r = eval::evaluate(&model, &set)?;
        print_report(&r);
        summary.metrics.push(r);
    }
    write_summary(&dir, &summary)
}

pub fn fewshot(common: &Common, ckpt: &Path, ks: &[usize], repeats: usize) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    if ks.is_empty() || repeats == 0 {
        return Err(CliError::Config("--k needs at least one value and --repeats must be positive".into()));
    }
    let model = load_checkpoint(&cfg, ckpt)?;
    let dir = start_run(&cfg)?;
    let seeds: Vec<u64> = (0..repeats as u64).map(|i| cfg.train.seed + i).collect();
    let mut tables: BTreeMap<String, FewShotTable> = BTreeMap::new();
    for (m, set) in load_sets(&cfg, true)? {
        if m.task != TaskKind::Diagnosis {
            continue;
        }
        let table = few_shot_eval(&model, &m, &set, ks, &seeds, &cfg.train)?;
        for r in &table.rows {
            println!("{} k={:<3} accuracy {:.4} +/- {:.4}", table.dataset, r.k, r.mean, r.std);
        }
        tables.insert(table.dataset.clone(), table);
    }
    std::fs::write(dir.join("fewshot.toml"), toml::to_string(&tables)?)?;
    write_summary(&dir, &Summary::new("fewshot", &cfg))
}

pub fn bench(common: &Common, repeats: usize) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let channels = match cfg.data.manifests.first() {
        Some(p) => load_manifest(p)?.channels,
        None => 2,
    };
    let head = HeadSpec {
        dataset: "bench".into(),
        task: TaskKind::Diagnosis,
        channels,
        classes: 4,
    };
    let dir = start_run(&cfg)?;
    let set = bench_efficiency(&standard_variants(&cfg.model), &head, repeats, cfg.train.seed)?;
    let base = set.reports[0].flops.total as f64;
    for r in &set.reports {
        let latency = r.latency.as_ref().map_or("-".to_string(), |t| format!("{:.3} ms", t.median_ms));
        println!(
            "{:<22} {:>10.3} GFLOPs ({:>6.2}x)  params {:>10}  prompt {:>8} ({:.2}%)  latency {latency}",
            r.variant,
            r.flops.total as f64 / 1e9,
            r.flops.total as f64 / base,
            r.total_params,
            r.prompt_trainable,
            100.0 * r.prompt_fraction
        );
    }
    std::fs::write(dir.join("bench.toml"), set.to_toml())?;
    write_summary(&dir, &Summary::new("bench", &cfg))
}

pub fn export(common: &Common, ckpt: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let model = load_checkpoint(&cfg, ckpt)?;
    let dir = start_run(&cfg)?;
    for (_, set) in load_sets(&cfg, true)? {
        let out = dir.join("embeddings").join(&set.dataset);
        let s = export_embeddings(&model, &set, &out)?;
        println!("{}: {} health rows, {} prototypes -> {}", set.dataset, s.health_rows, s.prototype_rows, out.display());
    }
    let mut summary = Summary::new("export-embeddings", &cfg);
    summary.source_checkpoint = Some(ckpt.to_path_buf());
    write_summary(&dir, &summary)
}
