//! Central finite differences, the independent oracle for every backward rule.

use super::{Float, Tensor};
use crate::error::Result;

/// Estimates `d f / d x` coordinate by coordinate with central differences.
///
/// The denominator is the step actually realized after rounding `x ± eps` to
/// the element type, so representable points get a symmetric stencil.
pub fn finite_diff_grad<T: Float>(
    mut f: impl FnMut(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = x.data()[k];
        let base = orig.to_f64().unwrap();
        let plus = T::lit(base + eps);
        let minus = T::lit(base - eps);
        probe.data_mut()[k] = plus;
        let f_plus = f(&probe)?;
        probe.data_mut()[k] = minus;
        let f_minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        let h = plus.to_f64().unwrap() - minus.to_f64().unwrap();
        out.push(T::lit((f_plus - f_minus) / h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest per-coordinate relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error<T: Float>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64().unwrap(), n.to_f64().unwrap());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f32>::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok((t.data()[0] as f64).powi(2)), &x, 1e-4).unwrap();
        assert!((g.data()[0] as f64 - 6.0).abs() <= 1e-7, "{}", g.data()[0]);
    }

    #[test]
    fn sine_at_zero() {
        let x = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|&v| (v as f64).sin()).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] as f64 - 1.0).abs() <= 1e-8, "{}", g.data()[0]);
    }
}
