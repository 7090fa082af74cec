//! Value-level activations and losses.
//!
//! Each function records the primitive on a throwaway tape so values agree
//! bit-for-bit with what the learners compute during meta-training.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

fn unary(x: &Tensor, what: &str, f: impl FnOnce(&mut Tape, super::Var) -> super::Var) -> Result<Tensor> {
    x.ensure_finite(what)?;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v);
    Ok(tape.value(out).clone())
}

/// Row-wise softmax; a vector is treated as one row.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    unary(x, "softmax input", |t, v| t.softmax_rows(v))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, "sigmoid input", |t, v| t.sigmoid(v))
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    unary(x, "tanh input", |t, v| t.tanh(v))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(x, "relu input", |t, v| t.relu(v))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_finite("mse prediction")?;
    target.ensure_finite("mse target")?;
    if pred.shape() != target.shape() {
        return shape_err(format!("mse {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let mut tape = Tape::new();
    let (p, y) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let l = tape.mse(p, y);
    Ok(tape.value(l).item())
}

/// Cross-entropy of probability rows `p` against one-hot rows `y`.
pub fn cross_entropy(p: &Tensor, y: &Tensor) -> Result<f64> {
    p.ensure_finite("cross_entropy probabilities")?;
    y.ensure_finite("cross_entropy targets")?;
    if p.shape() != y.shape() {
        return shape_err(format!("cross_entropy {:?} vs {:?}", p.shape(), y.shape()));
    }
    let c = p.cols();
    for (pr, yr) in p.data().chunks(c).zip(y.data().chunks(c)) {
        if pr.iter().any(|&v| v < 0.0) || (pr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("cross_entropy needs probability rows".into()));
        }
        if yr.iter().filter(|&&v| v == 1.0).count() != 1 || yr.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("cross_entropy needs one-hot targets".into()));
        }
    }
    let mut tape = Tape::new();
    let (pv, yv) = (tape.constant(p.clone()), tape.constant(y.clone()));
    let l = tape.cross_entropy(pv, yv);
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).unwrap().item(), 0.5);
        assert_eq!(tanh(&Tensor::scalar(0.0)).unwrap().item(), 0.0);
        assert_eq!(relu(&Tensor::scalar(-2.0)).unwrap().item(), 0.0);
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(mse(&v, &v).unwrap(), 0.0);
        let onehot = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(cross_entropy(&onehot, &onehot).unwrap(), 0.0);
    }

    #[test]
    fn uniform_five_way_prediction_costs_ln5() {
        let p = Tensor::vector(vec![0.2; 5]);
        let y = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((cross_entropy(&p, &y).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nan_inputs_are_numeric_errors() {
        let bad = Tensor::vector(vec![0.0, f64::NAN]);
        assert!(matches!(softmax(&bad), Err(Error::Numeric(_))));
        assert!(matches!(relu(&bad), Err(Error::Numeric(_))));
        assert!(matches!(mse(&bad, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_validates_its_operands() {
        let y = Tensor::vector(vec![1.0, 0.0]);
        assert!(cross_entropy(&Tensor::vector(vec![0.7, 0.7]), &y).is_err());
        assert!(cross_entropy(&Tensor::vector(vec![0.5, 0.5]), &Tensor::vector(vec![0.5, 0.5])).is_err());
    }
}
