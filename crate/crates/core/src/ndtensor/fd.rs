//! Central finite differences, used as an independent oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of a scalar function of one flat vector.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares the tape gradient of `build(inputs)` against central differences
/// for every input; returns the relative error over all inputs jointly.
pub fn check_gradients(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, out, vars)
    };
    let (tape, out, vars) = eval(inputs);
    let grads = tape.backward(out).expect("scalar output");
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = numeric_gradient(&flat, FD_STEP, |x| {
        let mut offset = 0;
        let vals: Vec<Tensor> = inputs
            .iter()
            .map(|t| {
                let part = x[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), part).unwrap()
            })
            .collect();
        let (tape, out, _) = eval(&vals);
        tape.value(out).item()
    });
    relative_error(&analytic, &numeric)
}
