use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Lower clamp on the norm in [`l2_normalize`]; zero slices map to zero.
pub const L2_EPS: f64 = 1e-12;

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * gaussian_cdf(x)
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    gaussian_cdf(x) + x * pdf
}

fn gaussian_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

fn axis_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Scales every slice along `axis` to unit Euclidean norm; all-zero slices stay zero.
pub fn l2_normalize<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis, "l2_normalize")?;
    let mut out = x.clone();
    let eps = T::of(L2_EPS);
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |p: usize| o * len * inner + p * inner + i;
            let norm = (0..len)
                .fold(T::zero(), |acc, p| acc + data[at(p)] * data[at(p)])
                .sqrt();
            let denom = norm.max(eps);
            for p in 0..len {
                data[at(p)] = data[at(p)] / denom;
            }
        }
    }
    Ok(out)
}

/// Softmax of a contiguous slice with max subtraction.
pub fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis, "softmax")?;
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let at = |p: usize| o * len * inner + p * inner + i;
            buf.clear();
            buf.extend((0..len).map(|p| data[at(p)]));
            for (p, v) in softmax_slice(&buf).into_iter().enumerate() {
                data[at(p)] = v;
            }
        }
    }
    Ok(out)
}
