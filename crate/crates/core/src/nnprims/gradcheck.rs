use crate::error::{Error, Result};

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `f` at `x`, shaped `[outputs, inputs]`.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if x.is_empty() {
        return Err(Error::Invalid("finite_diff_jacobian needs at least one input".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if plus.len() != minus.len() {
            return Err(Error::Invalid("f changed output length".into()));
        }
        let bad: Vec<usize> = plus
            .iter()
            .chain(&minus)
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(k, _)| k % plus.len())
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { indices: bad });
        }
        columns.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = columns[0].len();
    if m == 0 || columns.iter().any(|c| c.len() != m) {
        return Err(Error::Invalid("f must return a fixed, non-empty output".into()));
    }
    let n = x.len();
    Ok(Tensor::from_fn(&[m, n], |k| columns[k % n][k / n]))
}

/// Largest entrywise relative difference, with denominators floored at
/// `floor` so entries that are both near zero compare absolutely.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
