//! Anti-aliased downsampling: Hamming-windowed-sinc low-pass, then linear interpolation.

use std::f64::consts::PI;

use super::DataError;
use crate::numeric::Tensor;

/// Cutoff as a fraction of the target rate.
pub const CUTOFF_FRACTION: f64 = 0.45;
/// Taps per output-rate sample period.
pub const TAPS_PER_OUTPUT_PERIOD: usize = 63;

/// Unit-DC-gain low-pass taps for `from_hz -> to_hz`.
pub fn lowpass_taps(from_hz: f64, to_hz: f64) -> Vec<f64> {
    let ratio = (from_hz / to_hz).ceil().max(1.0) as usize;
    let mut n = TAPS_PER_OUTPUT_PERIOD * ratio;
    if n % 2 == 0 {
        n += 1;
    }
    let fc = CUTOFF_FRACTION * to_hz / from_hz;
    let centre = (n - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - centre;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Resamples `raw[L_raw, M]` from `from_hz` to `to_hz <= from_hz`.
///
/// Output length is `floor(L_raw * to_hz / from_hz)`; channels are processed
/// independently. Equal rates return the input unchanged.
pub fn resample(raw: &Tensor<f32>, from_hz: f64, to_hz: f64) -> Result<Tensor<f32>, DataError> {
    if !(to_hz > 0.0 && to_hz.is_finite() && from_hz.is_finite()) || to_hz > from_hz {
        return Err(DataError::Upsample { from_hz, to_hz });
    }
    if !raw.is_finite() {
        return Err(DataError::NonFinite("resample input".into()));
    }
    if raw.rank() != 2 {
        return Err(DataError::Invalid {
            field: "signal".into(),
            record: None,
            msg: format!("expected [frames, channels], got {:?}", raw.shape()),
        });
    }
    if to_hz == from_hz {
        return Ok(raw.clone());
    }
    let (len, m) = (raw.shape()[0], raw.shape()[1]);
    let out_len = (len as f64 * to_hz / from_hz).floor() as usize;
    let taps = lowpass_taps(from_hz, to_hz);
    let half = taps.len() / 2;
    let step = from_hz / to_hz;
    let mut out = vec![0f32; out_len * m];
    let mut filtered = vec![0f64; len];
    for ch in 0..m {
        let x: Vec<f64> = (0..len).map(|i| raw.data()[i * m + ch] as f64).collect();
        for (i, f) in filtered.iter_mut().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(len - 1);
            *f = (lo..=hi).map(|j| x[j] * taps[j + half - i]).sum();
        }
        for (o, slot) in (0..out_len).map(|o| (o, o * m + ch)) {
            let t = o as f64 * step;
            let j = t.floor() as usize;
            let frac = t - j as f64;
            let a = filtered[j.min(len - 1)];
            let b = filtered[(j + 1).min(len - 1)];
            out[slot] = (a + (b - a) * frac) as f32;
        }
    }
    Ok(Tensor::new(&[out_len, m], out)?)
}
