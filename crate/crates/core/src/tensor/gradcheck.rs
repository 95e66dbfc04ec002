use super::Tensor;
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn numeric_gradient<T, F>(mut f: F, at: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = at.clone();
    let two_h = h + h;
    let grad = (0..at.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::new(at.shape(), grad).expect("same shape")
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
