//! Central finite differences for checking analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
///
/// `f` is evaluated twice per element of `x`; it should accumulate its
/// result in `f64` so that the difference quotient is not swamped by
/// `f32` rounding.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f32) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // The perturbed values are rounded to f32; divide by the step that
        // was actually taken.
        let step = (orig + h) as f64 - (orig - h) as f64;
        grad.push(((up - down) / step) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// Smallest denominator used by [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Max-norm relative error `max|a - n| / max(max|a|, max|n|, floor)`.
///
/// Measured against the largest gradient component, so isolated entries
/// that are numerically zero do not dominate the ratio.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut diff = 0.0f64;
    let mut scale = RELATIVE_ERROR_FLOOR;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        diff = diff.max((a as f64 - n as f64).abs());
        scale = scale.max((a as f64).abs()).max((n as f64).abs());
    }
    diff / scale
}
