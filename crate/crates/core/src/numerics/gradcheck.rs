use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Central-difference step for double precision.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteCoordinate { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// A primal value paired with an accumulator for its cotangent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T> {
    value: Tensor<T>,
    cotangent: Tensor<T>,
}

impl<T: Real> Dual<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let cotangent = Tensor::zeros(value.shape());
        Self { value, cotangent }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn cotangent(&self) -> &Tensor<T> {
        &self.cotangent
    }

    /// Adds `delta` into the cotangent accumulator.
    pub fn accumulate(&mut self, delta: &Tensor<T>) -> Result<()> {
        self.value.expect_same_shape(delta, "dual accumulate")?;
        self.accumulate_slice(delta.data());
        Ok(())
    }

    pub(crate) fn accumulate_slice(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.cotangent.len());
        for (c, &d) in self.cotangent.data_mut().iter_mut().zip(delta) {
            *c = *c + d;
        }
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.value, self.cotangent)
    }
}
