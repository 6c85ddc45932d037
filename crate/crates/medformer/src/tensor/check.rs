//! Numerical gradient checking against the autodiff engine.

use super::{no_grad, Scalar, Tensor, TensorError};

/// Central finite differences of a scalar-valued function at `x`:
/// `df/dx_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h`, evaluated with graph
/// recording disabled. `f` must return a `[1]`-shaped tensor.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<Vec<f64>, TensorError>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>, TensorError>,
{
    no_grad(|| {
        let base = x.to_vec();
        let shape = x.shape().to_vec();
        let mut grad = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = T::cast(base[i].as_f64() + h);
            let plus = f(&Tensor::from_vec(probe.clone(), &shape)?)?.item()?.as_f64();
            probe[i] = T::cast(base[i].as_f64() - h);
            let minus = f(&Tensor::from_vec(probe, &shape)?)?.item()?.as_f64();
            grad.push((plus - minus) / (2.0 * h));
        }
        Ok(grad)
    })
}

/// Central finite differences taken by perturbing `t`'s buffer in place and
/// re-running an argumentless loss evaluation. This reaches parameters
/// captured inside modules, which `finite_diff_grad` (substitution-based)
/// cannot. The buffer is restored bit-exactly afterwards.
pub fn finite_diff_inplace<T: Scalar>(f: impl Fn() -> f64, t: &Tensor<T>, h: f64) -> Vec<f64> {
    no_grad(|| {
        let base = t.to_vec();
        let mut grad = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            t.update_data(|d| d[i] = T::cast(base[i].as_f64() + h));
            let plus = f();
            t.update_data(|d| d[i] = T::cast(base[i].as_f64() - h));
            let minus = f();
            t.update_data(|d| d[i] = base[i]);
            grad.push((plus - minus) / (2.0 * h));
        }
        grad
    })
}

/// Worst-case relative disagreement between an analytic gradient and a
/// numeric one: `|a − n| / max(|a|, |n|, 1e-3)`. The floor keeps
/// finite-difference noise on near-zero entries from dominating.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let a = a.as_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
        })
        .fold(0.0, f64::max)
}
