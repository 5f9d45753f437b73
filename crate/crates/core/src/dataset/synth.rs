//! Synthetic bearing vibration: periodic decaying-resonance impulses over noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_f32le, DatasetManifest, PayloadKind, RecordEntry, TaskKind};
use super::DataError;
use crate::numeric::Tensor;

/// Class names in label order.
pub const CLASS_NAMES: [&str; 4] = ["healthy", "inner_race", "outer_race", "ball"];
/// Impulse rate as a multiple of shaft rate, per fault class (label 1..=3).
pub const FAULT_MULTIPLES: [f64; 3] = [5.4, 3.6, 4.7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Diagnosis,
    Prognosis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub mode: SynthMode,
    pub sample_rate_hz: f64,
    pub record_len: usize,
    pub channels: usize,
    /// Prognosis: records per run-to-failure trajectory.
    pub life_steps: usize,
    pub anchor_count: usize,
    pub shaft_hz: f64,
    /// Relative per-record shaft-speed spread (uniform, +/-).
    pub speed_jitter: f64,
    pub resonance_hz: f64,
    pub decay_s: f64,
    pub impulse_amplitude: f64,
    /// Shaft-rate amplitude modulation depth of inner-race impulses.
    pub inner_modulation: f64,
    /// Relative spread (uniform, +/-) of each impulse's amplitude.
    pub amplitude_jitter: f64,
    /// Relative spread (uniform, +/-) of each inter-impulse interval.
    pub interval_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            mode: SynthMode::Diagnosis,
            sample_rate_hz: 5_000.0,
            record_len: 2_048,
            channels: 2,
            life_steps: 40,
            anchor_count: 4,
            shaft_hz: 30.0,
            speed_jitter: 0.02,
            resonance_hz: 1_500.0,
            decay_s: 0.0015,
            impulse_amplitude: 2.0,
            inner_modulation: 0.3,
            amplitude_jitter: 0.1,
            interval_jitter: 0.01,
            noise_std: 0.3,
            seed: 0,
        }
    }
}

/// Generated records held in memory, ready to window or to write out.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// One `[record_len, channels]` tensor per manifest record.
    pub payloads: Vec<Tensor<f32>>,
}

impl SyntheticDataset {
    /// Writes `manifest.toml` plus one `.f32` payload per record into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest, DataError> {
        std::fs::create_dir_all(dir)?;
        for (rec, payload) in self.manifest.records.iter().zip(&self.payloads) {
            write_f32le(&dir.join(&rec.path), payload)?;
        }
        self.manifest.save(&dir.join("manifest.toml"))?;
        let mut m = self.manifest.clone();
        m.root = dir.to_path_buf();
        Ok(m)
    }
}

/// Mixes a record identity into the root seed so every record has its own stream.
fn record_seed(root: u64, salt: u64) -> u64 {
    let mut z = root ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one record. `class` is a label in `0..4`; `amplitude` scales fault impulses.
pub fn render_record(spec: &SyntheticSpec, class: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (len, m, fs) = (spec.record_len, spec.channels, spec.sample_rate_hz);
    let shaft = spec.shaft_hz * (1.0 + rng.random_range(-1.0..=1.0) * spec.speed_jitter);
    let mut data = vec![0f64; len * m];

    if class > 0 && amplitude > 0.0 {
        let period = 1.0 / (FAULT_MULTIPLES[class - 1] * shaft);
        let mut t = rng.random_range(0.0..period);
        let shaft_phase = rng.random_range(0.0..2.0 * PI);
        let tail = ((8.0 * spec.decay_s) * fs).ceil() as usize;
        while t < len as f64 / fs {
            let mut a = amplitude * (1.0 + spec.amplitude_jitter * rng.random_range(-1.0..=1.0));
            if class == 1 {
                a *= 1.0 + spec.inner_modulation * (2.0 * PI * shaft * t + shaft_phase).cos();
            }
            let start = (t * fs).ceil() as usize;
            for n in start..(start + tail).min(len) {
                let dt = n as f64 / fs - t;
                let env = a * (-dt / spec.decay_s).exp();
                for ch in 0..m {
                    // Each sensor sees the resonance through a slightly different path.
                    let f = spec.resonance_hz * (1.0 + 0.08 * ch as f64);
                    let gain = 1.0 / (1.0 + 0.5 * ch as f64);
                    data[n * m + ch] += gain * env * (2.0 * PI * f * dt).sin();
                }
            }
            t += period * (1.0 + spec.interval_jitter * rng.random_range(-1.0..=1.0));
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("finite noise std");
        data.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Tensor::new(&[len, m], data.into_iter().map(|v| v as f32).collect()).expect("record shape")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| {
            Err(DataError::Invalid {
                field: "synth".into(),
                record: None,
                msg,
            })
        };
        if self.channels == 0 || self.record_len == 0 || !(self.sample_rate_hz > 0.0) {
            return bad("channels, record_len and sample_rate_hz must be positive".into());
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let top_resonance = self.resonance_hz * (1.0 + 0.08 * (self.channels - 1) as f64);
        let top_fault = FAULT_MULTIPLES.iter().cloned().fold(0.0, f64::max) * self.shaft_hz * (1.0 + self.speed_jitter);
        if !(self.shaft_hz > 0.0) || top_resonance >= nyquist || top_fault >= nyquist {
            return bad(format!("shaft, fault and resonance rates must lie in (0, {nyquist}) Hz"));
        }
        if !(self.decay_s > 0.0) || self.noise_std < 0.0 || self.impulse_amplitude < 0.0 {
            return bad("decay must be positive; noise and amplitude non-negative".into());
        }
        if self.mode == SynthMode::Prognosis && (self.life_steps < 2 || self.anchor_count < 2) {
            return bad("prognosis needs life_steps >= 2 and anchor_count >= 2".into());
        }
        Ok(())
    }
}

/// Generates a diagnosis (4-class) or prognosis (run-to-failure) dataset.
///
/// Diagnosis mode emits `n` records per class; prognosis mode emits `n`
/// trajectories of `life_steps` records each.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut payloads = Vec::new();
    match spec.mode {
        SynthMode::Diagnosis => {
            for i in 0..n {
                for class in 0..CLASS_NAMES.len() {
                    let id = records.len();
                    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, id as u64));
                    payloads.push(render_record(spec, class, spec.impulse_amplitude, &mut rng));
                    records.push(RecordEntry {
                        path: format!("rec_{id:05}.f32"),
                        label: Some(class),
                        rul: None,
                        condition_tag: Some(format!("load{}", i % 4)),
                    });
                }
            }
        }
        SynthMode::Prognosis => {
            for life in 0..n {
                let mut life_rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, u64::MAX - life as u64));
                let class = 1 + life_rng.random_range(0..FAULT_MULTIPLES.len());
                for step in 0..spec.life_steps {
                    let frac = if spec.life_steps > 1 { step as f64 / (spec.life_steps - 1) as f64 } else { 1.0 };
                    let id = records.len();
                    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, id as u64));
                    payloads.push(render_record(spec, class, spec.impulse_amplitude * frac, &mut rng));
                    records.push(RecordEntry {
                        path: format!("rec_{id:05}.f32"),
                        label: None,
                        rul: Some(1.0 - frac),
                        condition_tag: Some(format!("life{life}")),
                    });
                }
            }
        }
    }
    let (task, class_names, anchor_count) = match spec.mode {
        SynthMode::Diagnosis => (TaskKind::Diagnosis, CLASS_NAMES.iter().map(|s| s.to_string()).collect(), None),
        SynthMode::Prognosis => (TaskKind::Prognosis, Vec::new(), Some(spec.anchor_count)),
    };
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        task,
        channels: spec.channels,
        sample_rate_hz: spec.sample_rate_hz,
        payload: PayloadKind::F32le,
        class_names,
        anchor_count,
        records,
        root: Default::default(),
    };
    manifest.validate(false)?;
    Ok(SyntheticDataset { manifest, payloads })
}
