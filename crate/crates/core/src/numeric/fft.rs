//! Radix-2 real FFT returning magnitude and phase of the non-negative bins.

use std::f64::consts::PI;

use super::NumericError;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `|X_k|` for `k = 0..=L/2`.
    pub magnitude: Vec<f64>,
    /// `atan2(Im, Re)`; zero for bins with zero magnitude.
    pub phase: Vec<f64>,
}

/// In-place iterative Cooley-Tukey on interleaved `(re, im)` pairs.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (ang * k as f64).sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Real FFT of a power-of-two length signal.
pub fn rfft(x: &[f64]) -> Result<Spectrum, NumericError> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(NumericError::NotPowerOfTwo(n));
    }
    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    fft_in_place(&mut re, &mut im);
    let bins = n / 2 + 1;
    let mut magnitude = Vec::with_capacity(bins);
    let mut phase = Vec::with_capacity(bins);
    for k in 0..bins {
        let m = re[k].hypot(im[k]);
        magnitude.push(m);
        phase.push(if m == 0.0 { 0.0 } else { im[k].atan2(re[k]) });
    }
    Ok(Spectrum { magnitude, phase })
}

/// Nominal real-FFT cost, `5/2 * L * log2(L)` flops.
pub fn rfft_flops(n: usize) -> u64 {
    if n < 2 {
        return 0;
    }
    let log = n.trailing_zeros() as u64;
    5 * n as u64 * log / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, &v)| {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    (r + v * a.cos(), i + v * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let s = rfft(&vec![-1.5; 2048]).unwrap();
        assert!((s.magnitude[0] - 1.5 * 2048.0).abs() < 1e-9);
        assert!(s.magnitude[1..].iter().all(|&m| m < 1e-9));
    }

    #[test]
    fn integer_frequency_sine_has_single_bin() {
        let n = 2048;
        for k in [1usize, 7, 300, 1023] {
            let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * (k * t) as f64 / n as f64).sin()).collect();
            let s = rfft(&x).unwrap();
            assert!((s.magnitude[k] - n as f64 / 2.0).abs() < 1e-6, "bin {k}");
            let others = s
                .magnitude
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .fold(0.0f64, |a, (_, &m)| a.max(m));
            assert!(others < 1e-6);
        }
    }

    #[test]
    fn parseval_holds() {
        let n = 256;
        let x: Vec<f64> = (0..n).map(|t| ((t * 37 % 101) as f64 / 50.0 - 1.0).powi(3)).collect();
        let s = rfft(&x).unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum();
        let m = &s.magnitude;
        let mid: f64 = m[1..n / 2].iter().map(|v| v * v).sum();
        let freq = (m[0] * m[0] + 2.0 * mid + m[n / 2] * m[n / 2]) / n as f64;
        assert!((time - freq).abs() / time < 1e-6);
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..64).map(|t| ((t * 13 % 17) as f64).sin()).collect();
        let s = rfft(&x).unwrap();
        for (k, (r, i)) in naive_dft(&x).into_iter().enumerate() {
            assert!((s.magnitude[k] - r.hypot(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(rfft(&[0.0; 1000]), Err(NumericError::NotPowerOfTwo(1000))));
    }
}
