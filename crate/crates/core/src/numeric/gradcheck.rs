//! Central finite-difference check of reverse-mode gradients (64-bit only).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, NumericError, Tape, Tensor, Var};

pub type ParamMap = BTreeMap<String, Tensor<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor / rel_tol)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// `(parameter, flat index)` where the worst relative error occurred.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    /// Passes when the worst (floored) relative error is below `rel_tol`.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares the tape gradient of `loss_fn` with `(f(θ+h e_i) - f(θ-h e_i)) / 2h`.
///
/// `loss_fn` must register every entry of `params` on the tape (by name)
/// and return the scalar loss. At most `max_coords` coordinates are sampled
/// (all of them when fewer exist). Coordinates whose gradient magnitude is
/// below `abs_floor` are judged on absolute error, scaled so that an
/// absolute error of `abs_floor * rel_tol` counts as a relative error of
/// `rel_tol`.
pub fn grad_check<F>(loss_fn: F, params: &ParamMap, h: f64, max_coords: usize, abs_floor: f64, seed: u64) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var, NumericError>,
{
    let eval = |p: &ParamMap| -> Result<(f64, Option<Gradients<f64>>), NumericError> {
        let mut tape = Tape::new();
        let vars = p
            .iter()
            .map(|(k, v)| Ok((k.clone(), tape.param(k, v)?)))
            .collect::<Result<BTreeMap<_, _>, NumericError>>()?;
        let loss = loss_fn(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        Ok((value, Some(tape.backward(loss)?)))
    };
    let (_, grads) = eval(params)?;
    let grads = grads.expect("gradients");

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(k, v)| (0..v.len()).map(move |i| (k.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    let mut work = params.clone();
    for (name, i) in coords {
        let orig = params[&name].data()[i];
        work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
        let plus = eval_value(&loss_fn, &work)?;
        work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
        let minus = eval_value(&loss_fn, &work)?;
        work.get_mut(&name).unwrap().data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[&name].data()[i];
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
        let rel = abs / denom;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}

fn eval_value<F>(loss_fn: &F, p: &ParamMap) -> Result<f64, NumericError>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var, NumericError>,
{
    let mut tape = Tape::inference();
    let vars = p
        .iter()
        .map(|(k, v)| Ok((k.clone(), tape.param(k, v)?)))
        .collect::<Result<BTreeMap<_, _>, NumericError>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}
