use super::{backward, check_finite, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// Returns the largest per-element `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8)`. `f` is evaluated on a differentiable copy of `x` once and
/// on constant perturbed copies `2·x.numel()` times.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    check_finite(x.data(), "finite-difference input")?;
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::Invalid(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    check_finite(out.data(), "function value")?;
    let analytic = if out.requires_grad() {
        backward(&out)?
            .get(&leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };
    check_finite(&analytic, "analytic gradient")?;

    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut data = x.to_vec();
        data[i] += delta;
        let v = f(&Tensor::new(x.shape(), data)?)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                value: v,
                context: "function value under perturbation".into(),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
