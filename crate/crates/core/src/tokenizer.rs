//! Signal, prompt and task token construction, plus the patch decoder.
//!
//! Batched activations use the layout `[batch, seq, channel, d]`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::{rfft, FlopClass, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub window_len: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, window_len: usize) -> Result<Self, ModelError> {
        let cfg = Self { patch_len, stride, window_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_len == 0 || self.patch_len > self.window_len {
            return Err(ModelError::InvalidConfig {
                field: "patch_len".into(),
                msg: format!("P={} must lie in [1, L={}]", self.patch_len, self.window_len),
            });
        }
        if self.stride == 0 {
            return Err(ModelError::InvalidConfig {
                field: "stride".into(),
                msg: "S must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// `l_s = floor((L - P) / S) + 1`.
    pub fn signal_len(&self) -> usize {
        (self.window_len - self.patch_len) / self.stride + 1
    }

    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.signal_len()).map(|j| j * self.stride)
    }
}

/// Cuts a standardized `[L, M]` window into `[l_s, M, P]` patches.
pub fn patchify<T: Real>(window: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>, ModelError> {
    let batched = window.clone().reshape(&[1, window.shape()[0], window.cols()])?;
    let out = patchify_batch(&batched, cfg)?;
    let s = out.shape()[1..].to_vec();
    Ok(out.reshape(&s)?)
}

/// Cuts `[B, L, M]` windows into `[B, l_s, M, P]` patches.
pub fn patchify_batch<T: Real>(values: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>, ModelError> {
    cfg.validate()?;
    let [b, l, m] = values.shape() else {
        return Err(ModelError::Shape(format!("patchify expects [B, L, M], got {:?}", values.shape())));
    };
    let (b, l, m) = (*b, *l, *m);
    if l != cfg.window_len {
        return Err(ModelError::Shape(format!("window length {l} does not match L={}", cfg.window_len)));
    }
    let (ls, p) = (cfg.signal_len(), cfg.patch_len);
    let src = values.data();
    let mut out = Vec::with_capacity(b * ls * m * p);
    for bi in 0..b {
        for j in 0..ls {
            for c in 0..m {
                let base = bi * l * m + j * cfg.stride * m + c;
                out.extend((0..p).map(|t| src[base + t * m]));
            }
        }
    }
    Ok(Tensor::new(&[b, ls, m, p], out)?)
}

/// `T_s = patches . W_e + W_pos[0..l_s]`, positions broadcast over channels.
pub fn embed_patches<T: Real>(tape: &mut Tape<T>, patches: Var, w_e: Var, w_pos: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(patches).to_vec();
    if shape.len() < 3 {
        return Err(ModelError::Shape(format!("patches need [.., l_s, M, P], got {shape:?}")));
    }
    let ls = shape[shape.len() - 3];
    let (max, d) = (tape.shape(w_pos)[0], tape.shape(w_pos)[1]);
    if ls > max {
        return Err(ModelError::PositionTable { signal_len: ls, max });
    }
    let x = tape.matmul(patches, w_e)?;
    let pos = tape.slice(w_pos, 0, 0, ls)?;
    let pos = tape.reshape(pos, &[ls, 1, d])?;
    let out_shape = tape.shape(x).to_vec();
    let pos = tape.broadcast(pos, &out_shape)?;
    Ok(tape.add(x, pos)?)
}

/// Per-window statistics `[mu_m, ln sigma_m]` as an `[M, 2]` table.
pub fn stat_features(mu: &[f32], sigma: &[f32]) -> Vec<[f64; 2]> {
    mu.iter().zip(sigma).map(|(&m, &s)| [m as f64, (s as f64).ln()]).collect()
}

/// `T_p[b, i, m] = E_p[i] + [mu_m, ln sigma_m] . W_stat` from stats `[B, M, 2]`.
pub fn prompt_inputs<T: Real>(tape: &mut Tape<T>, stats: Var, e_p: Var, w_stat: Var) -> Result<Var, ModelError> {
    let s = tape.shape(stats).to_vec();
    let [b, m, two] = s[..] else {
        return Err(ModelError::Shape(format!("stats need [B, M, 2], got {s:?}")));
    };
    let (lp, d) = (tape.shape(e_p)[0], tape.shape(e_p)[1]);
    if two != 2 {
        return Err(ModelError::Shape(format!("stats need 2 features, got {two}")));
    }
    let proj = tape.matmul(stats, w_stat)?;
    let proj = tape.reshape(proj, &[b, 1, m, d])?;
    let proj = tape.broadcast(proj, &[b, lp, m, d])?;
    let base = tape.reshape(e_p, &[lp, 1, d])?;
    let base = tape.broadcast(base, &[b, lp, m, d])?;
    Ok(tape.add(base, proj)?)
}

/// Band-split spectral inputs `[B, n_spec, M, L + 2]` from standardized `[B, L, M]` windows.
///
/// Each channel's rfft gives `L/2 + 1` magnitudes and phases. Copy `j`
/// keeps bins of the `j`-th contiguous band (both halves) and zeroes the rest;
/// with `n_spec = 1` the whole `[magnitude; phase]` vector is kept.
pub fn spectral_input<T: Real>(values: &Tensor<T>, n_spec: usize) -> Result<Tensor<T>, ModelError> {
    let [b, l, m] = values.shape() else {
        return Err(ModelError::Shape(format!("spectral input expects [B, L, M], got {:?}", values.shape())));
    };
    let (b, l, m) = (*b, *l, *m);
    let bins = l / 2 + 1;
    let width = l + 2;
    let mut out = vec![T::zero(); b * n_spec * m * width];
    let src = values.data();
    for bi in 0..b {
        for c in 0..m {
            let col: Vec<f64> = (0..l).map(|t| src[(bi * l + t) * m + c].as_f64()).collect();
            let spec = rfft(&col)?;
            for j in 0..n_spec {
                let (lo, hi) = (j * bins / n_spec, (j + 1) * bins / n_spec);
                let base = ((bi * n_spec + j) * m + c) * width;
                for k in lo..hi {
                    out[base + k] = T::lit(spec.magnitude[k]);
                    out[base + bins + k] = T::lit(spec.phase[k]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, n_spec, m, width], out)?)
}

/// `T_t`: `e_cls` broadcast over channels, followed by `spectra . W_f`.
///
/// `spectra` is `[B, n_spec, M, L + 2]` or `None` when `n_spec = 0`. The
/// transform that produced `spectra` is charged to the tape here.
pub fn task_inputs<T: Real>(tape: &mut Tape<T>, spectra: Option<Var>, e_cls: Var, w_f: Var, batch: usize, channels: usize) -> Result<Var, ModelError> {
    let d = tape.shape(e_cls)[0];
    let cls = tape.reshape(e_cls, &[1, 1, 1, d])?;
    let cls = tape.broadcast(cls, &[batch, 1, channels, d])?;
    let Some(spectra) = spectra else {
        return Ok(cls);
    };
    let width = tape.shape(spectra)[3];
    let window_len = width - 2;
    tape.count_flops(FlopClass::Fft, (batch * channels) as u64 * crate::numeric::fft::rfft_flops(window_len));
    let spec = tape.matmul(spectra, w_f)?;
    Ok(tape.concat(&[cls, spec], 1)?)
}

/// `x_hat = z . G_w`, shared across channels.
pub fn decode_patch<T: Real>(tape: &mut Tape<T>, z: Var, g_w: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(z, g_w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(l: usize, m: usize) -> Tensor<f64> {
        Tensor::from_fn(&[l, m], |i| ((i * 7919) % 113) as f64 / 17.0 - 3.0)
    }

    #[test]
    fn paper_window_gives_eight_tokens() {
        assert_eq!(PatchConfig::new(256, 256, 2048).unwrap().signal_len(), 8);
    }

    #[test]
    fn whole_window_patch() {
        for s in [1, 7, 4096] {
            assert_eq!(PatchConfig::new(64, s, 64).unwrap().signal_len(), 1);
        }
    }

    #[test]
    fn overlapping_starts() {
        let cfg = PatchConfig::new(256, 128, 1000).unwrap();
        assert_eq!(cfg.starts().collect::<Vec<_>>(), vec![0, 128, 256, 384, 512, 640]);
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(PatchConfig::new(300, 1, 256).is_err());
    }

    #[test]
    fn patch_contents() {
        let cfg = PatchConfig::new(4, 3, 10).unwrap();
        let w = window(10, 2);
        let p = patchify(&w, &cfg).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4]);
        for j in 0..3 {
            for c in 0..2 {
                for t in 0..4 {
                    assert_eq!(p.get(&[j, c, t]), w.get(&[j * 3 + t, c]));
                }
            }
        }
    }

    #[test]
    fn zero_projection_yields_positions() {
        let mut tape = Tape::<f64>::new();
        let patches = tape.constant(Tensor::from_fn(&[1, 3, 2, 4], |i| i as f64)).unwrap();
        let w_e = tape.constant(Tensor::zeros(&[4, 5])).unwrap();
        let pos = Tensor::from_fn(&[6, 5], |i| i as f64 * 0.1);
        let w_pos = tape.constant(pos.clone()).unwrap();
        let t = embed_patches(&mut tape, patches, w_e, w_pos).unwrap();
        let v = tape.value(t);
        for j in 0..3 {
            for c in 0..2 {
                for k in 0..5 {
                    assert_eq!(v.get(&[0, j, c, k]), pos.get(&[j, k]));
                }
            }
        }
    }

    #[test]
    fn embedding_matches_scalar_loop() {
        let (p, d) = (3, 4);
        let patches = Tensor::from_fn(&[1, 2, 2, p], |i| (i as f64 * 0.37).sin());
        let w_e = Tensor::from_fn(&[p, d], |i| (i as f64 * 1.3).cos());
        let w_pos = Tensor::from_fn(&[4, d], |i| i as f64 * 0.01);
        let mut tape = Tape::<f64>::new();
        let (a, b, c) = (
            tape.constant(patches.clone()).unwrap(),
            tape.constant(w_e.clone()).unwrap(),
            tape.constant(w_pos.clone()).unwrap(),
        );
        let out = embed_patches(&mut tape, a, b, c).unwrap();
        for j in 0..2 {
            for m in 0..2 {
                for k in 0..d {
                    let mut acc = w_pos.get(&[j, k]);
                    for t in 0..p {
                        acc += patches.get(&[0, j, m, t]) * w_e.get(&[t, k]);
                    }
                    assert!((tape.value(out).get(&[0, j, m, k]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_channels_identical_tokens() {
        let w = Tensor::from_fn(&[16, 2], |i| ((i / 2) as f64).sin());
        let cfg = PatchConfig::new(4, 4, 16).unwrap();
        let p = patchify(&w, &cfg).unwrap().reshape(&[1, 4, 2, 4]).unwrap();
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(p).unwrap();
        let we = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64)).unwrap();
        let wp = tape.constant(Tensor::from_fn(&[8, 3], |i| -(i as f64))).unwrap();
        let t = embed_patches(&mut tape, pv, we, wp).unwrap();
        let v = tape.value(t);
        for j in 0..4 {
            for k in 0..3 {
                assert_eq!(v.get(&[0, j, 0, k]), v.get(&[0, j, 1, k]));
            }
        }
    }

    #[test]
    fn position_table_overflow() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[1, 5, 1, 2])).unwrap();
        let we = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let wp = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        assert!(matches!(embed_patches(&mut tape, p, we, wp), Err(ModelError::PositionTable { signal_len: 5, max: 4 })));
    }

    #[test]
    fn prompt_without_stats_projection_is_shared() {
        let mut tape = Tape::<f64>::new();
        let stats = tape.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64)).unwrap();
        let e_p = tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.5)).unwrap();
        let w_stat = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let t = prompt_inputs(&mut tape, stats, e_p, w_stat).unwrap();
        let v = tape.value(t);
        assert_eq!(v.shape(), &[1, 2, 3, 4]);
        for i in 0..2 {
            for k in 0..4 {
                assert_eq!(v.get(&[0, i, 0, k]), v.get(&[0, i, 2, k]));
                assert_eq!(v.get(&[0, i, 1, k]), (i * 4 + k) as f64 * 0.5);
            }
        }
    }

    #[test]
    fn constant_signal_has_only_dc() {
        let values = Tensor::<f64>::full(&[1, 64, 1], 2.5);
        let s = spectral_input(&values, 1).unwrap();
        assert_eq!(s.shape(), &[1, 1, 1, 66]);
        assert!((s.data()[0] - 2.5 * 64.0).abs() < 1e-9);
        assert!(s.data()[1..33].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn spectral_bands_partition_the_spectrum() {
        let values = Tensor::from_fn(&[1, 32, 1], |i| (i as f64 * 0.9).sin());
        let whole = spectral_input(&values, 1).unwrap();
        let bands = spectral_input(&values, 3).unwrap();
        for k in 0..34 {
            let sum: f64 = (0..3).map(|j| bands.get(&[0, j, 0, k])).sum();
            assert_eq!(sum, whole.get(&[0, 0, 0, k]));
        }
    }

    #[test]
    fn task_tokens_match_composition() {
        let (l, d) = (16, 3);
        let values = Tensor::from_fn(&[1, l, 2], |i| (i as f64 * 0.61).cos());
        let w_f = Tensor::from_fn(&[l + 2, d], |i| (i as f64 * 0.17).sin());
        let e_cls = Tensor::from_fn(&[d], |i| i as f64 + 1.0);
        let mut tape = Tape::<f64>::new();
        let spec = tape.constant(spectral_input(&values, 1).unwrap()).unwrap();
        let (ev, wv) = (tape.constant(e_cls.clone()).unwrap(), tape.constant(w_f.clone()).unwrap());
        let t = task_inputs(&mut tape, Some(spec), ev, wv, 1, 2).unwrap();
        let v = tape.value(t).clone();
        assert_eq!(v.shape(), &[1, 2, 2, d]);
        for c in 0..2 {
            let col: Vec<f64> = (0..l).map(|t| values.get(&[0, t, c])).collect();
            let s = rfft(&col).unwrap();
            let feat: Vec<f64> = s.magnitude.iter().chain(&s.phase).copied().collect();
            for k in 0..d {
                assert_eq!(v.get(&[0, 0, c, k]), e_cls.data()[k]);
                let want: f64 = feat.iter().enumerate().map(|(i, f)| f * w_f.get(&[i, k])).sum();
                assert!((v.get(&[0, 1, c, k]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let z = Tensor::from_fn(&[2, 4], |i| i as f64 - 2.0);
        let zv = tape.constant(z.clone()).unwrap();
        let g = tape.constant(Tensor::eye(4)).unwrap();
        let out = decode_patch(&mut tape, zv, g).unwrap();
        assert_eq!(tape.value(out), &z);
        let zero = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let g6 = tape.constant(Tensor::from_fn(&[4, 6], |i| i as f64)).unwrap();
        let out = decode_patch(&mut tape, zero, g6).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn patch_count_matches_enumeration((l, p, s) in (1usize..3000).prop_flat_map(|l| (Just(l), 1..=l, 1usize..600))) {
            let cfg = PatchConfig::new(p, s, l).unwrap();
            let brute = (0..l).filter(|st| st % s == 0 && st + p <= l).count();
            prop_assert_eq!(cfg.signal_len(), brute);
        }
    }

    proptest! {
        #[test]
        fn doubling_w_e_doubles_projection(seed in 0u64..100) {
            let patches = Tensor::from_fn(&[1, 2, 2, 3], |i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0);
            let w_e = Tensor::from_fn(&[3, 4], |i| ((i as u64 + seed) % 5) as f64 * 0.25);
            let mut tape = Tape::<f64>::new();
            let pv = tape.constant(patches).unwrap();
            let w1 = tape.constant(w_e.clone()).unwrap();
            let w2 = tape.constant(w_e.map(|v| 2.0 * v)).unwrap();
            let a = tape.matmul(pv, w1).unwrap();
            let b = tape.matmul(pv, w2).unwrap();
            let a2 = tape.value(a).map(|v| 2.0 * v);
            prop_assert_eq!(&a2, tape.value(b));
        }
    }
}
