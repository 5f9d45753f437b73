//! Forward-pass FLOP accounting.
//!
//! Conventions: one multiply-accumulate is 2 flops; softmax, layer norm,
//! row normalization and cross-entropy are 5 flops per element; other
//! elementwise arithmetic (adds, scaling, GELU, reductions) is 1 flop per
//! element touched; reshapes, slices, concatenation and broadcasts are free.
//! A real FFT of length `L` is charged `5/2 * L * log2 L`.
//!
//! The tape records these counts as ops execute; [`count_flops`] predicts
//! the same numbers from shapes alone for one inference forward pass
//! (tokenizer through health token), so the two can be compared exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fft::rfft_flops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FlopClass {
    MatMul,
    AttentionScore,
    AttentionMix,
    Softmax,
    Normalization,
    Elementwise,
    Fft,
}

impl FlopClass {
    pub fn name(self) -> &'static str {
        match self {
            FlopClass::MatMul => "matmul",
            FlopClass::AttentionScore => "attention_score",
            FlopClass::AttentionMix => "attention_mix",
            FlopClass::Softmax => "softmax",
            FlopClass::Normalization => "normalization",
            FlopClass::Elementwise => "elementwise",
            FlopClass::Fft => "fft",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub by_class: BTreeMap<String, u64>,
    pub by_module: BTreeMap<String, u64>,
    pub total: u64,
    /// Multiply-accumulates spent forming attention scores (`Q K^T`).
    pub score_macs: u64,
}

impl FlopReport {
    pub fn add(&mut self, class: FlopClass, module: &str, n: u64) {
        if n == 0 {
            return;
        }
        *self.by_class.entry(class.name().to_string()).or_default() += n;
        *self.by_module.entry(module.to_string()).or_default() += n;
        self.total += n;
    }

    pub fn class(&self, class: FlopClass) -> u64 {
        self.by_class.get(class.name()).copied().unwrap_or(0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flop report serializes")
    }
}

/// Shapes that determine forward cost.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopShape {
    pub batch: usize,
    pub channels: usize,
    pub prompt_len: usize,
    pub signal_len: usize,
    pub spectral_tokens: usize,
    pub window_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Replace both factored attention stages by attention over all `N*M` tokens.
    pub joint_attention: bool,
}

impl FlopShape {
    pub fn task_len(&self) -> usize {
        1 + self.spectral_tokens
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.signal_len + self.task_len()
    }
}

/// Score multiply-accumulates of one factored layer: `H (N M^2 d_k + M N^2 d_k)` per sample.
pub fn factored_score_macs(seq: usize, chan: usize, heads: usize, d_k: usize) -> u64 {
    (heads * (seq * chan * chan * d_k + chan * seq * seq * d_k)) as u64
}

/// Score multiply-accumulates of one joint attention over `N M` tokens: `H (N M)^2 d_k`.
pub fn joint_score_macs(seq: usize, chan: usize, heads: usize, d_k: usize) -> u64 {
    (heads * (seq * chan) * (seq * chan) * d_k) as u64
}

/// Closed-form forward flops for one inference pass.
pub fn count_flops(s: &FlopShape) -> FlopReport {
    use FlopClass::*;
    let mut r = FlopReport::default();
    let (b, m, d) = (s.batch as u64, s.channels as u64, s.d_model as u64);
    let (ls, lp, lt) = (s.signal_len as u64, s.prompt_len as u64, s.task_len() as u64);
    let (p, l) = (s.patch_len as u64, s.window_len as u64);

    r.add(MatMul, "tokenizer", 2 * b * ls * m * p * d);
    r.add(Elementwise, "tokenizer", b * ls * m * d);

    if lp > 0 {
        r.add(MatMul, "prompt", 2 * b * m * 2 * d);
        r.add(Elementwise, "prompt", b * lp * m * d);
    }

    if s.spectral_tokens > 0 {
        r.add(Fft, "task", b * m * rfft_flops(s.window_len));
        r.add(MatMul, "task", 2 * b * s.spectral_tokens as u64 * m * (l + 2) * d);
    }

    let n = s.seq_len();
    let rows = b * n as u64 * m;
    let heads = s.heads as u64;
    let dk = d / heads.max(1);
    let stages: [(u64, u64); 2] = if s.joint_attention {
        let g = (b, n as u64 * m);
        [g, g]
    } else {
        [(b * n as u64, m), (b * m, n as u64)]
    };
    for _ in 0..s.layers {
        for &(groups, size) in &stages {
            let macs = groups * heads * size * size * dk;
            r.score_macs += macs;
            r.add(MatMul, "backbone", 4 * 2 * rows * d * d);
            r.add(AttentionScore, "backbone", 2 * macs);
            r.add(Softmax, "backbone", 5 * groups * heads * size * size);
            r.add(AttentionMix, "backbone", 2 * macs);
            r.add(Elementwise, "backbone", rows * d);
            r.add(Normalization, "backbone", 5 * rows * d);
        }
        let ff = s.d_ff as u64;
        r.add(MatMul, "backbone", 2 * rows * d * ff + 2 * rows * ff * d);
        r.add(Elementwise, "backbone", rows * ff + rows * d);
        r.add(Normalization, "backbone", 5 * rows * d);
    }

    r.add(Elementwise, "health", b * lt * m * d);
    r
}
