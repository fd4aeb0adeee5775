//! Finite-difference validation of reverse-mode gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the computation from a flat parameter vector and returns the
/// scalar loss plus the parameter tensors in the order they were sliced from
/// the vector (their element counts must sum to `point.len()`). Returns the
/// maximum relative error `|a - n| / max(1, |a|, |n|)` over all coordinates.
///
/// The step should sit near the cube root of the floating point epsilon
/// (around 1e-5 for f64); callers are responsible for choosing points away
/// from kinks such as relu corners or pooling argmax switches.
pub fn grad_check<F>(point: &[f64], f: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)>,
{
    if epsilon <= 0.0 {
        return Err(Error::contract("grad_check", "step must be positive"));
    }
    let (loss, params) = f(point)?;
    if loss.numel() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }
    let total: usize = params.iter().map(|p| p.numel()).sum();
    if total != point.len() {
        return Err(Error::contract(
            "grad_check",
            format!("parameters cover {total} coordinates, point has {}", point.len()),
        ));
    }
    loss.backward()?;
    let mut analytic = Vec::with_capacity(point.len());
    for p in &params {
        match p.grad() {
            Some(g) => analytic.extend_from_slice(&g),
            None => analytic.extend(std::iter::repeat(0.0).take(p.numel())),
        }
    }

    let eval = |pt: &[f64]| -> Result<f64> {
        let (loss, _) = f(pt)?;
        Ok(loss.data()[0])
    };
    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for j in 0..point.len() {
        perturbed[j] = point[j] + epsilon;
        let plus = eval(&perturbed)?;
        perturbed[j] = point[j] - epsilon;
        let minus = eval(&perturbed)?;
        perturbed[j] = point[j];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = 1.0f64.max(analytic[j].abs()).max(numeric.abs());
        worst = worst.max((analytic[j] - numeric).abs() / denom);
    }
    Ok(worst)
}
