//! Central finite-difference check of tape gradients in double precision.

use super::{Prng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input and flat element index of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with `step`, for every element of every input (or at most
/// `max_coords` randomly chosen elements per input when given).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: Option<(usize, &mut Prng)>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::contract("gradient check needs a scalar output"));
        }
        Ok(v.item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut sample = max_coords;
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match sample.as_mut() {
            Some((k, rng)) if *k < x.len() => (0..*k).map(|_| rng.below(x.len())).collect(),
            _ => (0..x.len()).collect(),
        };
        for j in coords {
            let mut probe = inputs.to_vec();
            let mut shift = |delta: f64| -> Result<f64> {
                let mut d = x.to_vec();
                d[j] += delta;
                probe[i] = Tensor::new(x.shape().to_vec(), d)?;
                eval(&probe)
            };
            let numeric = (shift(step)? - shift(-step)?) / (2.0 * step);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
