//! Token assembly and the stacked channel-time attention encoder.

use crate::error::ModelError;
use crate::model::{AttentionKind, Binder, ModelConfig, NormPlacement};
use crate::numeric::{Grouping, Real, Tape, Var};

/// Segment lengths of a token sequence, in order prompt, signal, task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub prompt: usize,
    pub signal: usize,
    pub task: usize,
}

impl Segments {
    pub fn total(&self) -> usize {
        self.prompt + self.signal + self.task
    }

    /// Sequence index of signal token `j`.
    pub fn signal_pos(&self, j: usize) -> usize {
        self.prompt + j
    }
}

/// `[B, N, M, d]` tokens with their segment map.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub segments: Segments,
}

/// `T_in = T_p || T_s || T_t` along the sequence axis; `prompt` may be absent.
pub fn assemble<T: Real>(tape: &mut Tape<T>, prompt: Option<Var>, signal: Var, task: Var) -> Result<TokenSequence, ModelError> {
    let ss = tape.shape(signal).to_vec();
    let ts = tape.shape(task).to_vec();
    if ss.len() != 4 || ts.len() != 4 {
        return Err(ModelError::Shape(format!("tokens need rank 4, got signal {ss:?}, task {ts:?}")));
    }
    let check = |name: &str, s: &[usize]| {
        if s[0] != ss[0] || s[2] != ss[2] || s[3] != ss[3] {
            Err(ModelError::Shape(format!("{name} tokens {s:?} do not match signal tokens {ss:?} in batch, channels or width")))
        } else {
            Ok(())
        }
    };
    check("task", &ts)?;
    let mut parts = Vec::with_capacity(3);
    let mut prompt_len = 0;
    if let Some(p) = prompt {
        let ps = tape.shape(p).to_vec();
        if ps.len() != 4 {
            return Err(ModelError::Shape(format!("prompt tokens need rank 4, got {ps:?}")));
        }
        check("prompt", &ps)?;
        prompt_len = ps[1];
        parts.push(p);
    }
    parts.push(signal);
    parts.push(task);
    let tokens = tape.concat(&parts, 1)?;
    Ok(TokenSequence {
        tokens,
        segments: Segments {
            prompt: prompt_len,
            signal: ss[1],
            task: ts[1],
        },
    })
}

/// Replaces the final signal token of every channel by `mask_embedding + W_pos[l_s - 1]`.
pub fn mask_signal_tail<T: Real>(tape: &mut Tape<T>, seq: &TokenSequence, mask_embedding: Var, w_pos: Var) -> Result<TokenSequence, ModelError> {
    let ls = seq.segments.signal;
    if ls < 2 {
        return Err(ModelError::SignalTooShort(ls));
    }
    let shape = tape.shape(seq.tokens).to_vec();
    let (b, n, m, d) = (shape[0], shape[1], shape[2], shape[3]);
    let pos = seq.segments.signal_pos(ls - 1);
    let row = tape.slice(w_pos, 0, ls - 1, 1)?;
    let row = tape.reshape(row, &[d])?;
    let tok = tape.add(mask_embedding, row)?;
    let tok = tape.reshape(tok, &[1, 1, 1, d])?;
    let tok = tape.broadcast(tok, &[b, 1, m, d])?;
    let head = tape.slice(seq.tokens, 1, 0, pos)?;
    let tail = tape.slice(seq.tokens, 1, pos + 1, n - pos - 1)?;
    let tokens = tape.concat(&[head, tok, tail], 1)?;
    Ok(TokenSequence { tokens, segments: seq.segments })
}

/// Projection and normalization weights of one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnWeights {
    pub w1: Var,
    pub w2: Var,
    pub gain: Var,
    pub bias: Var,
}

fn attention_weights<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, layer: usize, stage: &str, ln: usize) -> Result<AttentionWeights, ModelError> {
    let mut get = |n: String| binder.get(tape, &n);
    Ok(AttentionWeights {
        q: get(format!("layer{layer}.{stage}.q"))?,
        k: get(format!("layer{layer}.{stage}.k"))?,
        v: get(format!("layer{layer}.{stage}.v"))?,
        o: get(format!("layer{layer}.{stage}.o"))?,
        gain: get(format!("layer{layer}.ln{ln}.g"))?,
        bias: get(format!("layer{layer}.ln{ln}.b"))?,
    })
}

fn sublayer<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var, norm: NormPlacement, body: impl FnOnce(&mut Tape<T>, Var) -> Result<Var, ModelError>) -> Result<Var, ModelError> {
    match norm {
        NormPlacement::Post => {
            let y = body(tape, x)?;
            let r = tape.add(x, y)?;
            Ok(tape.layer_norm(r, gain, bias)?)
        }
        NormPlacement::Pre => {
            let h = tape.layer_norm(x, gain, bias)?;
            let y = body(tape, h)?;
            Ok(tape.add(x, y)?)
        }
    }
}

/// Multi-head attention over `grouping`, output projection, residual and norm.
///
/// `x` holds rows ordered `(batch, seq, channel)` with width `d`.
pub fn attention_block<T: Real>(tape: &mut Tape<T>, x: Var, w: &AttentionWeights, grouping: Grouping, heads: usize, dropout: f64, norm: NormPlacement) -> Result<Var, ModelError> {
    sublayer(tape, x, w.gain, w.bias, norm, |tape, h| {
        let q = tape.matmul(h, w.q)?;
        let k = tape.matmul(h, w.k)?;
        let v = tape.matmul(h, w.v)?;
        let a = tape.attention(q, k, v, grouping, heads, dropout)?;
        Ok(tape.matmul(a, w.o)?)
    })
}

/// Attention across the `M` channels at every sequence position.
pub fn channel_attention_block<T: Real>(tape: &mut Tape<T>, x: Var, dims: (usize, usize, usize), w: &AttentionWeights, heads: usize, dropout: f64, norm: NormPlacement) -> Result<Var, ModelError> {
    let (batch, seq, chan) = dims;
    attention_block(tape, x, w, Grouping::Channel { batch, seq, chan }, heads, dropout, norm)
}

/// Bidirectional attention across the `N` sequence positions within every channel.
pub fn time_attention_block<T: Real>(tape: &mut Tape<T>, x: Var, dims: (usize, usize, usize), w: &AttentionWeights, heads: usize, dropout: f64, norm: NormPlacement) -> Result<Var, ModelError> {
    let (batch, seq, chan) = dims;
    attention_block(tape, x, w, Grouping::Time { batch, seq, chan }, heads, dropout, norm)
}

/// `GELU(x W1) W2` with residual and norm.
pub fn ffn_block<T: Real>(tape: &mut Tape<T>, x: Var, w: &FfnWeights, dropout: f64, norm: NormPlacement) -> Result<Var, ModelError> {
    sublayer(tape, x, w.gain, w.bias, norm, |tape, h| {
        let a = tape.matmul(h, w.w1)?;
        let a = tape.gelu(a)?;
        let a = tape.dropout(a, dropout)?;
        Ok(tape.matmul(a, w.w2)?)
    })
}

/// Runs the encoder stack and pools the health token.
///
/// Returns `(T_out [B, N, M, d], T_h [B, M, d])`; `T_h` is the mean of the
/// last `l_t` positions.
pub fn forward<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_, T>, cfg: &ModelConfig, seq: &TokenSequence) -> Result<(Var, Var), ModelError> {
    let shape = tape.shape(seq.tokens).to_vec();
    let (b, n, m, d) = (shape[0], shape[1], shape[2], shape[3]);
    if n != seq.segments.total() {
        return Err(ModelError::Shape(format!("sequence length {n} does not match segments {:?}", seq.segments)));
    }
    tape.set_scope("backbone");
    let mut x = tape.reshape(seq.tokens, &[b * n * m, d])?;
    for layer in 0..cfg.layers {
        let chan = attention_weights(tape, binder, layer, "chan", 1)?;
        let time = attention_weights(tape, binder, layer, "time", 2)?;
        let ffn = FfnWeights {
            w1: binder.get(tape, &format!("layer{layer}.ffn.w1"))?,
            w2: binder.get(tape, &format!("layer{layer}.ffn.w2"))?,
            gain: binder.get(tape, &format!("layer{layer}.ln3.g"))?,
            bias: binder.get(tape, &format!("layer{layer}.ln3.b"))?,
        };
        match cfg.attention {
            AttentionKind::Factored => {
                x = channel_attention_block(tape, x, (b, n, m), &chan, cfg.heads, cfg.dropout, cfg.norm)?;
                x = time_attention_block(tape, x, (b, n, m), &time, cfg.heads, cfg.dropout, cfg.norm)?;
            }
            AttentionKind::Joint => {
                let g = Grouping::Joint { batch: b, seq: n, chan: m };
                x = attention_block(tape, x, &chan, g, cfg.heads, cfg.dropout, cfg.norm)?;
                x = attention_block(tape, x, &time, g, cfg.heads, cfg.dropout, cfg.norm)?;
            }
        }
        x = ffn_block(tape, x, &ffn, cfg.dropout, cfg.norm)?;
    }
    let out = tape.reshape(x, &[b, n, m, d])?;
    tape.set_scope("health");
    let lt = seq.segments.task;
    let tail = tape.slice(out, 1, n - lt, lt)?;
    let health = tape.mean(tail, 1)?;
    Ok((out, health))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn t(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    fn consts(tape: &mut Tape<f64>, d: usize, seed: f64) -> AttentionWeights {
        AttentionWeights {
            q: tape.constant(t(&[d, d], seed)).unwrap(),
            k: tape.constant(t(&[d, d], seed + 0.3)).unwrap(),
            v: tape.constant(t(&[d, d], seed + 0.7)).unwrap(),
            o: tape.constant(t(&[d, d], seed + 1.1)).unwrap(),
            gain: tape.constant(t(&[d], seed + 1.9).map(|v| 1.0 + 0.1 * v)).unwrap(),
            bias: tape.constant(t(&[d], seed + 2.3).map(|v| 0.1 * v)).unwrap(),
        }
    }

    /// Scalar-loop reference: per group, heads of softmax(QK^T/sqrt(dk))V, projection, residual, norm.
    fn oracle(x: &Tensor<f64>, w: &[Tensor<f64>; 6], groups: &[Vec<usize>], heads: usize) -> Tensor<f64> {
        let d = x.cols();
        let dk = d / heads;
        let proj = |m: &Tensor<f64>, r: usize, c: usize| (0..d).map(|i| x.get(&[r, i]) * m.get(&[i, c])).sum::<f64>();
        let rows = x.rows();
        let mut att = vec![vec![0.0; d]; rows];
        for g in groups {
            for h in 0..heads {
                for &i in g {
                    let scores: Vec<f64> = g
                        .iter()
                        .map(|&j| (0..dk).map(|c| proj(&w[0], i, h * dk + c) * proj(&w[1], j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for (jj, &j) in g.iter().enumerate() {
                        let p = (scores[jj] - mx).exp() / z;
                        for c in 0..dk {
                            att[i][h * dk + c] += p * proj(&w[2], j, h * dk + c);
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            let y: Vec<f64> = (0..d).map(|c| x.get(&[r, c]) + (0..d).map(|i| att[r][i] * w[3].get(&[i, c])).sum::<f64>()).collect();
            let mu = y.iter().sum::<f64>() / d as f64;
            let var = y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                out.set(&[r, c], (y[c] - mu) / (var + 1e-5).sqrt() * w[4].data()[c] + w[5].data()[c]);
            }
        }
        out
    }

    fn run_block(n: usize, m: usize, d: usize, heads: usize, channel: bool) {
        let x = t(&[n * m, d], 0.77);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone()).unwrap();
        let w = consts(&mut tape, d, 0.41);
        let out = if channel {
            channel_attention_block(&mut tape, xv, (1, n, m), &w, heads, 0.0, NormPlacement::Post).unwrap()
        } else {
            time_attention_block(&mut tape, xv, (1, n, m), &w, heads, 0.0, NormPlacement::Post).unwrap()
        };
        let wt = [w.q, w.k, w.v, w.o, w.gain, w.bias].map(|v| tape.value(v).clone());
        let groups: Vec<Vec<usize>> = if channel {
            (0..n).map(|s| (0..m).map(|c| s * m + c).collect()).collect()
        } else {
            (0..m).map(|c| (0..n).map(|s| s * m + c).collect()).collect()
        };
        let want = oracle(&x, &wt, &groups, heads);
        let diff = tape.value(out).max_abs_diff(&want);
        assert!(diff < 1e-10, "n={n} m={m} channel={channel}: {diff}");
    }

    #[test]
    fn channel_block_matches_oracle() {
        run_block(2, 3, 4, 2, true);
        run_block(8, 4, 8, 2, true);
    }

    #[test]
    fn time_block_matches_oracle() {
        run_block(3, 2, 4, 1, false);
        run_block(8, 4, 8, 4, false);
    }

    #[test]
    fn single_channel_is_value_path() {
        let (n, d) = (3, 4);
        let x = t(&[n, d], 0.5);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone()).unwrap();
        let w = consts(&mut tape, d, 0.2);
        let out = channel_attention_block(&mut tape, xv, (1, n, 1), &w, 2, 0.0, NormPlacement::Post).unwrap();
        // With one channel, attention returns V exactly.
        let v = tape.matmul(xv, w.v).unwrap();
        let p = tape.matmul(v, w.o).unwrap();
        let r = tape.add(xv, p).unwrap();
        let want = tape.layer_norm(r, w.gain, w.bias).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-14);
    }

    #[test]
    fn identical_channels_stay_identical() {
        let (n, d) = (3, 4);
        let base = t(&[n, d], 0.9);
        let x = Tensor::from_fn(&[n * 2, d], |i| base.data()[(i / (2 * d)) * d + i % d]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x).unwrap();
        let w = consts(&mut tape, d, 0.3);
        let out = channel_attention_block(&mut tape, xv, (1, n, 2), &w, 2, 0.0, NormPlacement::Post).unwrap();
        let v = tape.value(out);
        for s in 0..n {
            assert_eq!(v.row(2 * s), v.row(2 * s + 1));
        }
    }

    fn seq_parts(tape: &mut Tape<f64>, lp: usize, ls: usize, lt: usize, d: usize) -> (Option<Var>, Var, Var) {
        let p = (lp > 0).then(|| tape.constant(t(&[1, lp, 2, d], 0.1)).unwrap());
        let s = tape.constant(t(&[1, ls, 2, d], 0.2)).unwrap();
        let k = tape.constant(t(&[1, lt, 2, d], 0.3)).unwrap();
        (p, s, k)
    }

    #[test]
    fn assembly_lengths() {
        let mut tape = Tape::<f64>::new();
        let (p, s, k) = seq_parts(&mut tape, 10, 8, 2, 4);
        let seq = assemble(&mut tape, p, s, k).unwrap();
        assert_eq!(seq.segments.total(), 20);
        assert_eq!(tape.shape(seq.tokens), &[1, 20, 2, 4]);
        let (_, s, k) = seq_parts(&mut tape, 0, 8, 2, 4);
        let seq = assemble(&mut tape, None, s, k).unwrap();
        assert_eq!(seq.segments.total(), 10);
        let bad = tape.constant(t(&[1, 2, 2, 5], 0.3)).unwrap();
        assert!(assemble(&mut tape, None, s, bad).is_err());
    }

    #[test]
    fn masking_replaces_only_the_last_signal_token() {
        let mut tape = Tape::<f64>::new();
        let (p, s, k) = seq_parts(&mut tape, 3, 4, 2, 4);
        let seq = assemble(&mut tape, p, s, k).unwrap();
        let mask = tape.constant(t(&[4], 0.8)).unwrap();
        let w_pos = tape.constant(t(&[16, 4], 0.6)).unwrap();
        let masked = mask_signal_tail(&mut tape, &seq, mask, w_pos).unwrap();
        let twice = mask_signal_tail(&mut tape, &masked, mask, w_pos).unwrap();
        let (a, b) = (tape.value(seq.tokens).clone(), tape.value(masked.tokens).clone());
        assert_eq!(&b, tape.value(twice.tokens));
        for pos in 0..9 {
            for c in 0..2 {
                for k in 0..4 {
                    let (x, y) = (a.get(&[0, pos, c, k]), b.get(&[0, pos, c, k]));
                    if pos == 6 {
                        let want = tape.value(mask).data()[k] + tape.value(w_pos).get(&[3, k]);
                        assert_eq!(y, want);
                    } else {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
        }
        let (_, s1, k1) = seq_parts(&mut tape, 0, 1, 2, 4);
        let short = assemble(&mut tape, None, s1, k1).unwrap();
        assert!(matches!(mask_signal_tail(&mut tape, &short, mask, w_pos), Err(ModelError::SignalTooShort(1))));
    }
}
