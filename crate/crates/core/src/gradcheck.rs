//! Central finite differences, used as an oracle for analytic gradients.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` with step `h`.
pub fn central_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)` with a floor of 1e-8.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_rel_err");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tensor-level relative error `‖a - b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn rel_err_norm(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in rel_err_norm");
    let norm = |t: &[f64]| libm::sqrt(t.iter().map(|v| v * v).sum::<f64>());
    let diff: f64 = libm::sqrt(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum());
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
