use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` of a scalar
/// function, one element at a time. Intended as a test oracle.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_grad: non-finite evaluation at element {i}"
            )));
        }
        *g = (plus - minus) / (2.0 * eps);
    }
    Ok(Tensor::raw(x.shape().to_vec(), grad))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`: the norm-wise relative error used by
/// every gradient check. The floor keeps identically-zero gradients from
/// dividing by zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a.data()).max(norm(b.data())).max(1e-8)
}
