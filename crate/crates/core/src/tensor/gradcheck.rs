//! Central finite-difference check of reverse-mode gradients in f64.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    /// Largest absolute error per input tensor.
    pub max_abs_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

const REL_FLOOR: f64 = 1e-3;

fn scalar_of(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar objective, got {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Validity(format!("gradient check objective is {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar `f(inputs)` with central differences.
pub fn grad_check_report<G>(f: G, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    G: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.tracked()).collect();
    let out = f(&tracked)?;
    scalar_of(&out)?;
    let grads = out.backward()?;

    let mut report = GradCheckReport { max_rel_err: Vec::new(), max_abs_err: Vec::new() };
    for (i, t) in tracked.iter().enumerate() {
        let analytic = grads
            .get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for j in 0..t.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = t.to_vec();
                data[j] += delta;
                let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                probe[i] = Tensor::from_vec(data, t.shape())?;
                let _g = super::no_grad();
                scalar_of(&f(&probe)?)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[j];
            let diff = (a - numeric).abs();
            abs = abs.max(diff);
            rel = rel.max(diff / a.abs().max(numeric.abs()).max(REL_FLOOR));
        }
        report.max_rel_err.push(rel);
        report.max_abs_err.push(abs);
    }
    Ok(report)
}

/// Worst relative error across all inputs; see [`grad_check_report`].
pub fn grad_check<G>(f: G, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    G: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    Ok(grad_check_report(f, inputs, eps)?.worst())
}
