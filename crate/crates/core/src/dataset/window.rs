use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numeric::Tensor;

/// Lower bound applied to per-channel standard deviations.
pub const SIGMA_FLOOR: f32 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSource {
    pub dataset: String,
    pub record: usize,
    pub offset: usize,
}

/// A standardized `[L, M]` excerpt plus the statistics used to standardize it.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow {
    pub values: Tensor<f32>,
    pub mu: Vec<f32>,
    /// Floored at [`SIGMA_FLOOR`].
    pub sigma: Vec<f32>,
    pub source: WindowSource,
}

impl SignalWindow {
    /// Standardizes `raw[L, M]` per channel with mean and (population)
    /// standard deviation computed over the first `stats_rows` rows only.
    pub fn standardize(raw: &Tensor<f32>, stats_rows: usize, source: WindowSource) -> Result<Self, DataError> {
        if raw.rank() != 2 || stats_rows == 0 || stats_rows > raw.shape()[0] {
            return Err(DataError::Invalid {
                field: "window".into(),
                record: Some(source.record),
                msg: format!("cannot standardize {:?} over {stats_rows} rows", raw.shape()),
            });
        }
        let m = raw.shape()[1];
        let mut mu = Vec::with_capacity(m);
        let mut sigma = Vec::with_capacity(m);
        for c in 0..m {
            let col = (0..stats_rows).map(|r| raw.data()[r * m + c] as f64);
            let mean = col.clone().sum::<f64>() / stats_rows as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / stats_rows as f64;
            mu.push(mean as f32);
            sigma.push((var.sqrt() as f32).max(SIGMA_FLOOR));
        }
        let values = Tensor::from_fn(raw.shape(), |i| {
            let c = i % m;
            (((raw.data()[i] as f64) - mu[c] as f64) / sigma[c] as f64) as f32
        });
        Ok(Self { values, mu, sigma, source })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Samples of channel `c`.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        let m = self.channels();
        (0..self.len()).map(|r| self.values.data()[r * m + c]).collect()
    }
}

/// Number of windows `floor((total - len) / hop) + 1`, or 0 when `total < len`.
pub fn window_count(total: usize, len: usize, hop: usize) -> usize {
    if total < len || hop == 0 {
        0
    } else {
        (total - len) / hop + 1
    }
}

/// Cuts `signal[L_total, M]` into raw `[L, M]` windows starting every `hop` rows.
pub fn extract_windows(signal: &Tensor<f32>, len: usize, hop: usize) -> Result<Vec<Tensor<f32>>, DataError> {
    let total = signal.shape().first().copied().unwrap_or(0);
    if hop == 0 || len == 0 {
        return Err(DataError::Invalid {
            field: "hop".into(),
            record: None,
            msg: "window length and hop must be positive".into(),
        });
    }
    if total < len {
        return Err(DataError::TooShort { len: total, window: len });
    }
    (0..window_count(total, len, hop))
        .map(|w| Ok(signal.slice_axis(0, w * hop, len)?))
        .collect()
}

/// Windows a record and standardizes each window over its full length.
pub fn window_and_standardize(signal: &Tensor<f32>, len: usize, hop: usize, dataset: &str, record: usize) -> Result<Vec<SignalWindow>, DataError> {
    extract_windows(signal, len, hop)?
        .iter()
        .enumerate()
        .map(|(w, raw)| {
            SignalWindow::standardize(
                raw,
                len,
                WindowSource {
                    dataset: dataset.to_string(),
                    record,
                    offset: w * hop,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(len: usize, m: usize) -> Tensor<f32> {
        Tensor::from_fn(&[len, m], |i| ((i * 31 % 97) as f32 / 13.0).sin() * (1 + i % m) as f32)
    }

    #[test]
    fn two_windows_from_4096() {
        let w = window_and_standardize(&wave(4096, 2), 2048, 2048, "d", 0).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].source.offset, 2048);
    }

    #[test]
    fn standardized_moments() {
        let w = &window_and_standardize(&wave(2048, 3), 2048, 2048, "d", 0).unwrap()[0];
        for c in 0..3 {
            let ch: Vec<f64> = w.channel(c).iter().map(|&v| v as f64).collect();
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
        }
    }

    #[test]
    fn constant_channel_is_zero_with_floored_sigma() {
        let sig = Tensor::from_fn(&[64, 2], |i| if i % 2 == 0 { 3.5 } else { i as f32 });
        let w = &window_and_standardize(&sig, 64, 64, "d", 0).unwrap()[0];
        assert!(w.channel(0).iter().all(|&v| v == 0.0));
        assert_eq!(w.sigma[0], SIGMA_FLOOR);
        assert_eq!(w.mu[0], 3.5);
    }

    #[test]
    fn affine_copy_standardizes_identically() {
        let base = wave(512, 1);
        let both = Tensor::from_fn(&[512, 2], |i| {
            let x = base.data()[i / 2];
            if i % 2 == 0 { x } else { 3.0 * x + 5.0 }
        });
        let w = &window_and_standardize(&both, 512, 512, "d", 0).unwrap()[0];
        for (a, b) in w.channel(0).iter().zip(w.channel(1)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_ne!(w.mu[0], w.mu[1]);
        assert!((w.sigma[1] / w.sigma[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn too_short_signal_errors() {
        assert!(matches!(window_and_standardize(&wave(100, 1), 128, 128, "d", 0), Err(DataError::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn window_count_formula(total in 1usize..600, len in 1usize..200, hop in 1usize..90) {
            prop_assume!(total >= len);
            let sig = Tensor::<f32>::zeros(&[total, 1]);
            let n = extract_windows(&sig, len, hop).unwrap().len();
            let brute = (0..total).step_by(hop).filter(|&s| s + len <= total).count();
            prop_assert_eq!(n, brute);
            prop_assert_eq!(n, (total - len) / hop + 1);
        }

        #[test]
        fn standardization_is_idempotent(seed in 0u64..1000) {
            let sig = Tensor::from_fn(&[256, 2], |i| (((i as u64 + 1) * (seed + 7)) % 101) as f32 / 7.0 - 3.0);
            let once = &window_and_standardize(&sig, 256, 256, "d", 0).unwrap()[0];
            let twice = &window_and_standardize(&once.values, 256, 256, "d", 0).unwrap()[0];
            prop_assert!(once.values.max_abs_diff(&twice.values) < 1e-5);
        }

        #[test]
        fn standardization_is_affine_invariant(a in 0.01f32..50.0, b in -100f32..100.0, seed in 0u64..1000) {
            let sig = Tensor::from_fn(&[256, 1], |i| (((i as u64 + 3) * (seed + 11)) % 89) as f32 / 9.0);
            let moved = sig.map(|v| a * v + b);
            let x = &window_and_standardize(&sig, 256, 256, "d", 0).unwrap()[0];
            let y = &window_and_standardize(&moved, 256, 256, "d", 0).unwrap()[0];
            prop_assert!(x.values.max_abs_diff(&y.values) < 1e-5 * 20.0);
        }
    }
}
