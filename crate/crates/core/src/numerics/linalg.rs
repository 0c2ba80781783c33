use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// `out[m×n] = a[m×k] · b[k×n]`, summing in ascending `k`.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = T::zero();
            for (p, &av) in row.iter().enumerate() {
                acc = acc + av * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[k×n] = aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for p in 0..k {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..m {
                acc = acc + a[i * k + p] * b[i * n + j];
            }
            out[p * n + j] = acc;
        }
    }
}

/// `out[m×k] = a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let col = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + row[j] * col[j];
            }
            out[i * k + p] = acc;
        }
    }
}

/// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]`.
///
/// Leading batch extents must match or be 1 (broadcast). Operands of
/// different rank are left-padded with unit extents.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != k2 {
        return Err(mismatch());
    }

    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let depth = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; depth - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (ab, bb) = (pad(a_batch), pad(b_batch));
    let mut out_batch = Vec::with_capacity(depth);
    for (&x, &y) in ab.iter().zip(&bb) {
        match (x, y) {
            _ if x == y => out_batch.push(x),
            (1, _) => out_batch.push(y),
            (_, 1) => out_batch.push(x),
            _ => return Err(mismatch()),
        }
    }

    let batches: usize = out_batch.iter().product();
    // Offsets of each broadcast batch into the two operands.
    let offsets: Vec<(usize, usize)> = (0..batches)
        .map(|flat| {
            let (mut rem, mut ao, mut bo) = (flat, 0, 0);
            let (mut astride, mut bstride) = (1, 1);
            for d in (0..depth).rev() {
                let idx = rem % out_batch[d];
                rem /= out_batch[d];
                if ab[d] != 1 {
                    ao += idx * astride;
                }
                if bb[d] != 1 {
                    bo += idx * bstride;
                }
                astride *= ab[d];
                bstride *= bb[d];
            }
            (ao * m * k, bo * k * n)
        })
        .collect();

    let mut out = vec![T::zero(); batches * m * n];
    let (ad, bd) = (a.data(), b.data());
    if m * n > 0 {
        par::for_each_chunk_mut(&mut out, m * n, |bi, chunk| {
            let (ao, bo) = offsets[bi];
            gemm(&ad[ao..ao + m * k], &bd[bo..bo + k * n], m, k, n, chunk);
        });
    }
    let mut shape = out_batch;
    shape.extend_from_slice(&[m, n]);
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = matmul(&t(&[3, 3], &a), &t(&[3, 3], &b)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j], s);
            }
        }
    }

    #[test]
    fn broadcasts_rank2_rhs_over_batch() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let w = t(&[2, 1], &[1., -1.]);
        let out = matmul(&a, &w).unwrap();
        assert_eq!(out.shape(), &[2, 3, 1]);
        assert_eq!(out.data(), &[-1.0; 6]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = Tensor::<f64>::zeros(&[2, 3, 3]);
        let d = Tensor::<f64>::zeros(&[4, 3, 3]);
        assert!(matmul(&c, &d).is_err());
    }

    #[test]
    fn transposed_kernels_agree_with_gemm() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 2x4
        let mut tn = vec![0.0; 12];
        gemm_tn(&a, &b, 2, 3, 4, &mut tn);
        let at = [a[0], a[3], a[1], a[4], a[2], a[5]];
        let mut expect = vec![0.0; 12];
        gemm(&at, &b, 3, 2, 4, &mut expect);
        assert_eq!(tn, expect);

        let c: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect(); // 4x3
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &c, 2, 3, 4, &mut nt);
        let mut ct = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                ct[j * 4 + i] = c[i * 3 + j];
            }
        }
        let mut expect = vec![0.0; 8];
        gemm(&a, &ct, 2, 3, 4, &mut expect);
        assert_eq!(nt, expect);
    }
}
