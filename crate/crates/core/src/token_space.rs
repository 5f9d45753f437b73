//! Fault-prototype banks: cosine-similarity diagnosis and distance-based RUL.
//!
//! Plain functions work on finished tensors (inference); the `*_on` variants
//! build the same quantities on a tape for training.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::{Real, Tape, Tensor, Var};

/// Default softmax temperature of the diagnosis loss.
pub const TEMPERATURE: f64 = 0.07;

pub fn prototypes_name(dataset: &str) -> String {
    format!("fault.{dataset}.prototypes")
}

pub fn rul_names(dataset: &str) -> (String, String) {
    (format!("rul.{dataset}.a"), format!("rul.{dataset}.b"))
}

/// Affine map of the negated minimum distance, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RulHead {
    pub a: f64,
    pub b: f64,
}

impl Default for RulHead {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

impl RulHead {
    pub fn apply(&self, d_min: f64) -> f64 {
        (self.a * -d_min + self.b).clamp(0.0, 1.0)
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

fn flat_rows<T: Real>(bank: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = bank.shape()[0];
    let per = bank.len() / c.max(1);
    (0..c).map(|i| bank.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect()).collect()
}

fn check_shapes<T: Real>(health: &Tensor<T>, bank: &Tensor<T>) -> Result<(), ModelError> {
    if bank.rank() < 2 || bank.shape()[1..] != *health.shape() {
        return Err(ModelError::Shape(format!("health token {:?} does not match prototypes {:?}", health.shape(), bank.shape())));
    }
    Ok(())
}

/// Cosine similarity of flattened `T_h [M, d]` against each prototype of `bank [C, M, d]`.
pub fn similarity<T: Real>(health: &Tensor<T>, bank: &Tensor<T>) -> Result<Vec<f64>, ModelError> {
    check_shapes(health, bank)?;
    let h = health.to_f64_vec();
    Ok(flat_rows(bank).iter().map(|p| cosine(&h, p)).collect())
}

/// Index of the highest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn diagnose<T: Real>(health: &Tensor<T>, bank: &Tensor<T>) -> Result<usize, ModelError> {
    Ok(argmax(&similarity(health, bank)?))
}

/// Smallest Euclidean distance between flattened `T_h` and any prototype.
pub fn min_distance<T: Real>(health: &Tensor<T>, bank: &Tensor<T>) -> Result<f64, ModelError> {
    check_shapes(health, bank)?;
    let h = health.to_f64_vec();
    Ok(flat_rows(bank)
        .iter()
        .map(|p| p.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min))
}

pub fn predict_rul<T: Real>(health: &Tensor<T>, bank: &Tensor<T>, head: &RulHead) -> Result<f64, ModelError> {
    Ok(head.apply(min_distance(health, bank)?))
}

fn flatten_pair<T: Real>(tape: &mut Tape<T>, health: Var, bank: Var) -> Result<(Var, Var), ModelError> {
    let hs = tape.shape(health).to_vec();
    let bs = tape.shape(bank).to_vec();
    if hs.len() != 3 || bs.len() != 3 || hs[1..] != bs[1..] {
        return Err(ModelError::Shape(format!("health {hs:?} vs prototypes {bs:?}")));
    }
    let flat = hs[1] * hs[2];
    let h = tape.reshape(health, &[hs[0], flat])?;
    let p = tape.reshape(bank, &[bs[0], flat])?;
    Ok((h, p))
}

/// Cosine similarities `[B, C]` of health tokens `[B, M, d]` against `bank [C, M, d]`.
pub fn similarity_on<T: Real>(tape: &mut Tape<T>, health: Var, bank: Var) -> Result<Var, ModelError> {
    let (h, p) = flatten_pair(tape, health, bank)?;
    let h = tape.row_normalize(h)?;
    let p = tape.row_normalize(p)?;
    let pt = tape.transpose(p)?;
    Ok(tape.matmul(h, pt)?)
}

/// Mean cross-entropy of `softmax(sims / tau)` against `labels`.
pub fn diagnosis_loss<T: Real>(tape: &mut Tape<T>, sims: Var, labels: &[usize], tau: f64) -> Result<Var, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::InvalidConfig {
            field: "temperature".into(),
            msg: format!("must be positive, got {tau}"),
        });
    }
    let logits = tape.scale(sims, T::lit(1.0 / tau))?;
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Unclamped RUL estimates `a * (-d_min) + b`, shape `[B]`.
pub fn rul_raw_on<T: Real>(tape: &mut Tape<T>, health: Var, bank: Var, a: Var, b: Var) -> Result<Var, ModelError> {
    let (h, p) = flatten_pair(tape, health, bank)?;
    let dist = tape.pairwise_distance(h, p)?;
    let d_min = tape.min_last(dist)?;
    let n = tape.shape(d_min)[0];
    let a = tape.broadcast(a, &[n])?;
    let b = tape.broadcast(b, &[n])?;
    let neg = tape.scale(d_min, T::lit(-1.0))?;
    let y = tape.mul(a, neg)?;
    Ok(tape.add(y, b)?)
}

/// Clamped RUL estimates in `[0, 1]`.
pub fn rul_on<T: Real>(tape: &mut Tape<T>, health: Var, bank: Var, a: Var, b: Var) -> Result<Var, ModelError> {
    let raw = rul_raw_on(tape, health, bank, a, b)?;
    Ok(tape.clamp(raw, T::zero(), T::one())?)
}

/// Mean squared error; targets must lie in `[0, 1]`.
pub fn prognosis_loss<T: Real>(tape: &mut Tape<T>, predictions: Var, targets: &[f64]) -> Result<Var, ModelError> {
    if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(ModelError::BadTarget(format!("rul {bad} outside [0, 1]")));
    }
    let shape = tape.shape(predictions).to_vec();
    if shape.iter().product::<usize>() != targets.len() {
        return Err(ModelError::Shape(format!("{} targets for predictions {shape:?}", targets.len())));
    }
    let t = tape.constant(Tensor::new(&shape, targets.iter().map(|&v| T::lit(v)).collect())?)?;
    let diff = tape.sub(predictions, t)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, ParamMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn self_similarity_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = rand_t(&mut rng, &[3, 2, 4]);
        let h = bank.slice_axis(0, 2, 1).unwrap().reshape(&[2, 4]).unwrap();
        let s = similarity(&h, &bank).unwrap();
        assert!((s[2] - 1.0).abs() < 1e-12);
        assert_eq!(diagnose(&h, &bank).unwrap(), 2);
        let scaled = h.map(|v| 3.7 * v);
        for (a, b) in similarity(&scaled, &bank).unwrap().iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = rand_t(&mut rng, &[3, 2, 4]);
        let h = rand_t(&mut rng, &[2, 4]);
        let s = similarity(&h, &bank).unwrap();
        for c in 0..3 {
            let (mut dot, mut nh, mut np) = (0.0, 0.0, 0.0);
            for m in 0..2 {
                for k in 0..4 {
                    let (x, y) = (h.get(&[m, k]), bank.get(&[c, m, k]));
                    dot += x * y;
                    nh += x * x;
                    np += y * y;
                }
            }
            assert!((s[c] - dot / (nh.sqrt() * np.sqrt())).abs() < 1e-12);
        }
        // Symmetry.
        let other = rand_t(&mut rng, &[2, 4]);
        let b1 = other.clone().reshape(&[1, 2, 4]).unwrap();
        let b2 = h.clone().reshape(&[1, 2, 4]).unwrap();
        assert!((similarity(&h, &b1).unwrap()[0] - similarity(&other, &b2).unwrap()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_score_zero() {
        let bank = Tensor::<f64>::from_fn(&[2, 1, 2], |i| i as f64);
        assert_eq!(similarity(&Tensor::zeros(&[1, 2]), &bank).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9]), 1);
        let bank = Tensor::<f64>::new(&[3, 1, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(diagnose(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(), &bank).unwrap(), 1);
    }

    #[test]
    fn diagnose_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let bank = rand_t(&mut rng, &[5, 2, 3]);
            let h = rand_t(&mut rng, &[2, 3]);
            let s = similarity(&h, &bank).unwrap();
            let brute = (0..5).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            assert_eq!(diagnose(&h, &bank).unwrap(), brute);
            let a = rng.random_range(0.01..10.0);
            assert_eq!(diagnose(&h.map(|v| v * a), &bank).unwrap(), brute);
        }
    }

    #[test]
    fn rul_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = rand_t(&mut rng, &[4, 2, 3]);
        let h = bank.slice_axis(0, 1, 1).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(predict_rul(&h, &bank, &RulHead { a: 2.0, b: 0.4 }).unwrap(), 0.4);
        assert_eq!(predict_rul(&h, &bank, &RulHead { a: 2.0, b: 1.4 }).unwrap(), 1.0);
        let h = rand_t(&mut rng, &[2, 3]);
        assert_eq!(predict_rul(&h, &bank, &RulHead { a: 0.0, b: 0.3 }).unwrap(), 0.3);
        let brute = (0..4)
            .map(|c| (0..2).flat_map(|m| (0..3).map(move |k| (m, k))).map(|(m, k)| (h.get(&[m, k]) - bank.get(&[c, m, k])).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((min_distance(&h, &bank).unwrap() - brute).abs() < 1e-12);
        let head = RulHead { a: 0.7, b: 0.9 };
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = head.apply(i as f64 * 0.05);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn tape_similarity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = rand_t(&mut rng, &[3, 2, 4]);
        let h = rand_t(&mut rng, &[2, 2, 4]);
        let mut tape = Tape::<f64>::new();
        let (hv, bv) = (tape.constant(h.clone()).unwrap(), tape.constant(bank.clone()).unwrap());
        let s = similarity_on(&mut tape, hv, bv).unwrap();
        for b in 0..2 {
            let hb = h.slice_axis(0, b, 1).unwrap().reshape(&[2, 4]).unwrap();
            let want = similarity(&hb, &bank).unwrap();
            for c in 0..3 {
                assert!((tape.value(s).get(&[b, c]) - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_similarity_loss_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::full(&[2, 5], 0.3)).unwrap();
        let l = diagnosis_loss(&mut tape, s, &[0, 4], TEMPERATURE).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
        let sharp = tape.constant(Tensor::new(&[1, 3], vec![-1.0, 1.0, -1.0]).unwrap()).unwrap();
        let l = diagnosis_loss(&mut tape, sharp, &[1], 0.01).unwrap();
        assert!(tape.value(l).data()[0] < 1e-10);
        assert!(diagnosis_loss(&mut tape, sharp, &[3], 0.1).is_err());
    }

    #[test]
    fn diagnosis_loss_falls_as_true_similarity_rises() {
        let loss_at = |s1: f64| {
            let mut tape = Tape::<f64>::new();
            let s = tape.constant(Tensor::new(&[1, 3], vec![0.1, s1, -0.2]).unwrap()).unwrap();
            let l = diagnosis_loss(&mut tape, s, &[1], TEMPERATURE).unwrap();
            tape.value(l).data()[0]
        };
        assert!(loss_at(0.5) < loss_at(0.4));
    }

    #[test]
    fn diagnosis_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamMap::new();
        params.insert("h".into(), rand_t(&mut rng, &[4, 2, 3]));
        params.insert("p".into(), rand_t(&mut rng, &[3, 2, 3]));
        let report = grad_check(
            |tape, v| {
                let s = similarity_on(tape, v["h"], v["p"]).map_err(num)?;
                diagnosis_loss(tape, s, &[0, 2, 1, 2], TEMPERATURE).map_err(num)
            },
            &params,
            1e-4,
            usize::MAX,
            1e-2,
            0,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn rul_gradients_and_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamMap::new();
        params.insert("h".into(), rand_t(&mut rng, &[5, 2, 3]));
        params.insert("p".into(), rand_t(&mut rng, &[4, 2, 3]));
        params.insert("a".into(), Tensor::new(&[1], vec![0.4]).unwrap());
        params.insert("b".into(), Tensor::new(&[1], vec![0.9]).unwrap());
        let targets = [0.1, 0.5, 0.9, 0.3, 0.0];
        let report = grad_check(
            |tape, v| {
                let y = rul_raw_on(tape, v["h"], v["p"], v["a"], v["b"]).map_err(num)?;
                prognosis_loss(tape, y, &targets).map_err(num)
            },
            &params,
            1e-4,
            usize::MAX,
            1e-2,
            0,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");

        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[3], vec![0.2, 0.4, 0.6]).unwrap()).unwrap();
        let l = prognosis_loss(&mut tape, p, &[0.2, 0.4, 0.6]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let l = prognosis_loss(&mut tape, p, &[0.1, 0.3, 0.5]).unwrap();
        assert!((tape.value(l).data()[0] - 0.01).abs() < 1e-12);
        assert!(matches!(prognosis_loss(&mut tape, p, &[0.1, 1.3, 0.5]), Err(ModelError::BadTarget(_))));
        let preds: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
        let tg: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
        let pv = tape.constant(Tensor::new(&[7], preds.clone()).unwrap()).unwrap();
        let l = prognosis_loss(&mut tape, pv, &tg).unwrap();
        let want = preds.iter().zip(&tg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 7.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }

    fn num(e: ModelError) -> crate::numeric::NumericError {
        match e {
            ModelError::Numeric(n) => n,
            other => panic!("{other}"),
        }
    }
}
