//! Local context aggregation on `[B, H, W, C]` fields: 3×3 max/avg pooling
//! with reflective padding, sigmoid-weighted blending, and a gated residual
//! whose gate is capped at one half.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Real, Tensor};

/// Reflect-101 index into `[0, n)` for offsets of at most one.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Max and average pooling of one `[H, W, C]` block, plus the flat argmax
/// source of every max output.
pub(crate) fn pool_block<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<T>, Vec<usize>) {
    let mut max = vec![T::zero(); h * w * c];
    let mut avg = vec![T::zero(); h * w * c];
    let mut arg = vec![0usize; h * w * c];
    let ninth = T::of(9.0);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_at = 0;
                let mut sum = T::zero();
                for dy in -1..=1isize {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        let sx = reflect(xx as isize + dx, w);
                        let at = (sy * w + sx) * c + ch;
                        let v = x[at];
                        sum = sum + v;
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                let o = (y * w + xx) * c + ch;
                max[o] = best;
                avg[o] = sum / ninth;
                arg[o] = best_at;
            }
        }
    }
    (max, avg, arg)
}

/// Routes max/avg cotangents back to the pooled input.
pub(crate) fn pool_block_vjp<T: Real>(
    dmax: &[T],
    davg: &[T],
    argmax: &[usize],
    h: usize,
    w: usize,
    c: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); h * w * c];
    let ninth = T::of(9.0);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let o = (y * w + xx) * c + ch;
                dx[argmax[o]] = dx[argmax[o]] + dmax[o];
                let share = davg[o] / ninth;
                for dy in -1..=1isize {
                    let sy = reflect(y as isize + dy, h);
                    for dx_ in -1..=1isize {
                        let sx = reflect(xx as isize + dx_, w);
                        let at = (sy * w + sx) * c + ch;
                        dx[at] = dx[at] + share;
                    }
                }
            }
        }
    }
    dx
}

/// 3×3 stride-1 max and average pooling with reflective padding of one.
pub fn dual_pool<T: Real>(z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, h, w, c] = *z.shape() else {
        return Err(Error::InvalidShape {
            op: "dual_pool",
            detail: format!("expected [B, H, W, C], got {:?}", z.shape()),
        });
    };
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "dual_pool",
            detail: "spatial extents must be positive".into(),
        });
    }
    let block = h * w * c;
    let (mut max, mut avg) = (Vec::with_capacity(b * block), Vec::with_capacity(b * block));
    for bi in 0..b {
        let (m, a, _) = pool_block(&z.data()[bi * block..(bi + 1) * block], h, w, c);
        max.extend(m);
        avg.extend(a);
    }
    Ok((
        Tensor::from_parts(z.shape().to_vec(), max),
        Tensor::from_parts(z.shape().to_vec(), avg),
    ))
}

/// `sigmoid(w_p)·max + (1 − sigmoid(w_p))·avg`.
pub fn hybrid_pool<T: Real>(max: &Tensor<T>, avg: &Tensor<T>, w_p_raw: T) -> Result<Tensor<T>> {
    let s = sigmoid(w_p_raw);
    max.zip_map(avg, |m, a| s * m + (T::one() - s) * a)
}

/// Effective residual gate `0.5·sigmoid(w_n)`.
pub fn residual_gate<T: Real>(w_n_raw: T) -> T {
    T::of(0.5) * sigmoid(w_n_raw)
}

/// `(1 − g)·z + g·pooled` with `g = 0.5·sigmoid(w_n)`.
pub fn gated_residual<T: Real>(z: &Tensor<T>, pooled: &Tensor<T>, w_n_raw: T) -> Result<Tensor<T>> {
    let g = residual_gate(w_n_raw);
    z.zip_map(pooled, |a, p| (T::one() - g) * a + g * p)
}
