//! Low-rank weight update `h = x·W₀ᵀ + (α/r)·x·Aᵀ·Bᵀ` with frozen `W₀` and
//! trainable factors `A: [r, k]`, `B: [d, r]`.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn, Real, Tensor};

/// Standard deviation of the Gaussian used to initialise `A`.
pub const A_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Value => "value",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: BTreeSet<Target>,
    pub num_layers: u64,
    /// Scaling numerator; `None` means "equal to rank".
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            targets: [Target::Query, Target::Value].into_iter().collect(),
            num_layers: 12,
            alpha: None,
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA needs at least one target projection"));
        }
        if !self.alpha().is_finite() {
            return Err(Error::config("LoRA alpha must be finite"));
        }
        Ok(())
    }

    /// Identifiers of every trainable tensor, e.g. `lora.layer03.value.A`.
    pub fn trainable_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for layer in 0..self.num_layers {
            for t in &self.targets {
                for f in ["A", "B"] {
                    ids.push(format!("lora.layer{layer:02}.{}.{f}", t.name()));
                }
            }
        }
        ids
    }
}

/// `num_layers · |targets| · r · (d + k)`.
pub fn lora_parameter_count(cfg: &LoraConfig, d: u64, k_dim: u64) -> u64 {
    cfg.num_layers * cfg.targets.len() as u64 * cfg.rank as u64 * (d + k_dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<T> {
    /// Frozen `[d, k]`.
    pub base: Tensor<T>,
    /// `[r, k]`
    pub a: Tensor<T>,
    /// `[d, r]`
    pub b: Tensor<T>,
    pub alpha: T,
}

impl<T: Real> LoraLayer<T> {
    pub fn new(base: Tensor<T>, a: Tensor<T>, b: Tensor<T>, alpha: T) -> Result<Self> {
        let layer = Self { base, a, b, alpha };
        layer.validate()?;
        Ok(layer)
    }

    /// `B = 0`, `A ~ N(0, 0.01²)`, so the initial update is exactly zero.
    pub fn init<R: Rng>(base: Tensor<T>, rank: usize, alpha: T, rng: &mut R) -> Result<Self> {
        let [d, k] = *base.shape() else {
            return Err(Error::InvalidShape {
                op: "lora",
                detail: format!("base weight must be 2-D, got {:?}", base.shape()),
            });
        };
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let a = Tensor::from_fn(&[rank, k], |_| T::of(normal.sample(rng)));
        Self::new(base, a, Tensor::zeros(&[d, rank]), alpha)
    }

    pub fn out_dim(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> T {
        self.alpha / T::of(self.rank() as f64)
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidShape { op: "lora", detail };
        let [d, k] = *self.base.shape() else {
            return Err(bad(format!("base must be 2-D, got {:?}", self.base.shape())));
        };
        let [r, ka] = *self.a.shape() else {
            return Err(bad(format!("A must be 2-D, got {:?}", self.a.shape())));
        };
        if ka != k || self.b.shape() != [d, r] {
            return Err(bad(format!(
                "A {:?} / B {:?} incompatible with base {:?}",
                self.a.shape(),
                self.b.shape(),
                self.base.shape()
            )));
        }
        if r == 0 || r > d.min(k) {
            return Err(bad(format!("rank {r} outside [1, min({d}, {k})]")));
        }
        Ok(())
    }

    /// Dense `W₀ + (α/r)·B·A`.
    pub fn materialize(&self) -> Tensor<T> {
        let (d, k, r) = (self.out_dim(), self.in_dim(), self.rank());
        let mut delta = vec![T::zero(); d * k];
        gemm(self.b.data(), self.a.data(), d, r, k, &mut delta);
        let s = self.scale();
        Tensor::from_parts(
            vec![d, k],
            self.base
                .data()
                .iter()
                .zip(&delta)
                .map(|(&w, &dw)| w + s * dw)
                .collect(),
        )
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape().last() {
            Some(&k) if k == self.in_dim() => Ok(x.len() / k.max(1)),
            _ => Err(Error::ShapeMismatch {
                op: "lora_apply",
                left: x.shape().to_vec(),
                right: self.base.shape().to_vec(),
            }),
        }
    }
}

fn out_shape(x: &[usize], d: usize) -> Vec<usize> {
    let mut s = x.to_vec();
    *s.last_mut().expect("non-scalar") = d;
    s
}

/// Applies the adapted projection to `x: [..., k]`.
pub fn lora_apply<T: Real>(layer: &LoraLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let m = layer.rows(x)?;
    let (d, k, r) = (layer.out_dim(), layer.in_dim(), layer.rank());
    let mut base = vec![T::zero(); m * d];
    gemm_nt(x.data(), layer.base.data(), m, k, d, &mut base);
    let mut low = vec![T::zero(); m * r];
    gemm_nt(x.data(), layer.a.data(), m, k, r, &mut low);
    let mut delta = vec![T::zero(); m * d];
    gemm_nt(&low, layer.b.data(), m, r, d, &mut delta);
    let s = layer.scale();
    let out = base.iter().zip(&delta).map(|(&h, &dh)| h + s * dh).collect();
    let out = Tensor::from_parts(out_shape(x.shape(), d), out);
    out.ensure_finite("lora_apply")?;
    Ok(out)
}

/// Cotangents for the input and the two trainable factors. `W₀` is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraVjp<T> {
    pub x: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn lora_vjp<T: Real>(layer: &LoraLayer<T>, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<LoraVjp<T>> {
    let m = layer.rows(x)?;
    let (d, k, r) = (layer.out_dim(), layer.in_dim(), layer.rank());
    if upstream.shape() != out_shape(x.shape(), d).as_slice() {
        return Err(Error::ShapeMismatch {
            op: "lora_vjp",
            left: out_shape(x.shape(), d),
            right: upstream.shape().to_vec(),
        });
    }
    let s = layer.scale();
    let g = upstream.data();

    let mut low = vec![T::zero(); m * r];
    gemm_nt(x.data(), layer.a.data(), m, k, r, &mut low);

    let mut db = vec![T::zero(); d * r];
    gemm_tn(g, &low, m, d, r, &mut db);
    db.iter_mut().for_each(|v| *v = *v * s);

    let mut dlow = vec![T::zero(); m * r];
    gemm(g, layer.b.data(), m, d, r, &mut dlow);
    dlow.iter_mut().for_each(|v| *v = *v * s);

    let mut da = vec![T::zero(); r * k];
    gemm_tn(&dlow, x.data(), m, r, k, &mut da);

    let mut dx = vec![T::zero(); m * k];
    gemm(g, layer.base.data(), m, d, k, &mut dx);
    let mut dx_low = vec![T::zero(); m * k];
    gemm(&dlow, layer.a.data(), m, r, k, &mut dx_low);
    dx.iter_mut().zip(&dx_low).for_each(|(a, &b)| *a = *a + b);

    Ok(LoraVjp {
        x: Tensor::from_parts(x.shape().to_vec(), dx),
        a: Tensor::from_parts(vec![r, k], da),
        b: Tensor::from_parts(vec![d, r], db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn eye(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_b_is_base_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random(&[5, 4], &mut rng);
        let layer = LoraLayer::init(base.clone(), 2, 2.0, &mut rng).unwrap();
        let x = random(&[3, 4], &mut rng);
        let h = lora_apply(&layer, &x).unwrap();
        let mut expect = vec![0.0; 15];
        gemm_nt(x.data(), base.data(), 3, 4, 5, &mut expect);
        assert_eq!(h.data(), expect.as_slice());
    }

    #[test]
    fn identity_delta_path() {
        let layer = LoraLayer::new(Tensor::zeros(&[3, 3]), eye(3), eye(3), 3.0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(lora_apply(&layer, &x).unwrap(), x);
    }

    #[test]
    fn matches_materialized_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = LoraLayer::new(random(&[6, 5], &mut rng), random(&[3, 5], &mut rng), random(&[6, 3], &mut rng), 1.7).unwrap();
        let x = random(&[2, 4, 5], &mut rng);
        let h = lora_apply(&layer, &x).unwrap();
        assert_eq!(h.shape(), &[2, 4, 6]);
        let w = layer.materialize();
        let mut dense = vec![0.0; 48];
        gemm_nt(x.data(), w.data(), 8, 5, 6, &mut dense);
        for (a, b) in h.data().iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn doubling_rank_halves_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let x = random(&[3, 4], &mut rng);
        let narrow = LoraLayer::new(Tensor::zeros(&[4, 4]), a.clone(), b.clone(), 2.0).unwrap();
        // rank 4 with the extra factors zeroed: same BA, twice the divisor
        let a4 = Tensor::from_fn(&[4, 4], |i| if i < 8 { a.data()[i] } else { 0.0 });
        let b4 = Tensor::from_fn(&[4, 4], |i| if i % 4 < 2 { b.data()[(i / 4) * 2 + i % 4] } else { 0.0 });
        let wide = LoraLayer::new(Tensor::zeros(&[4, 4]), a4, b4, 2.0).unwrap();
        let hn = lora_apply(&narrow, &x).unwrap();
        let hw = lora_apply(&wide, &x).unwrap();
        for (n, w) in hn.data().iter().zip(hw.data()) {
            assert!((n - 2.0 * w).abs() < 1e-14);
        }
    }

    #[test]
    fn vjp_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = LoraLayer::new(random(&[5, 6], &mut rng), random(&[2, 6], &mut rng), random(&[5, 2], &mut rng), 4.0).unwrap();
        let x = random(&[3, 6], &mut rng);
        let up = random(&[3, 5], &mut rng);
        let g = lora_vjp(&layer, &x, &up).unwrap();
        let fx = finite_diff_grad(|t| lora_apply(&layer, t).unwrap().dot(&up).unwrap(), &x, FD_STEP).unwrap();
        let fa = finite_diff_grad(
            |t| {
                let l = LoraLayer { a: t.clone(), ..layer.clone() };
                lora_apply(&l, &x).unwrap().dot(&up).unwrap()
            },
            &layer.a,
            FD_STEP,
        )
        .unwrap();
        let fb = finite_diff_grad(
            |t| {
                let l = LoraLayer { b: t.clone(), ..layer.clone() };
                lora_apply(&l, &x).unwrap().dot(&up).unwrap()
            },
            &layer.b,
            FD_STEP,
        )
        .unwrap();
        assert!(max_relative_error(g.x.data(), fx.data()) < 1e-7);
        assert!(max_relative_error(g.a.data(), fa.data()) < 1e-7);
        assert!(max_relative_error(g.b.data(), fb.data()) < 1e-7);
    }

    #[test]
    fn zero_b_cotangents() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = LoraLayer::init(random(&[4, 4], &mut rng), 2, 2.0, &mut rng).unwrap();
        let x = random(&[2, 4], &mut rng);
        let zero = lora_vjp(&layer, &x, &Tensor::zeros(&[2, 4])).unwrap();
        assert!(zero.x.data().iter().chain(zero.a.data()).chain(zero.b.data()).all(|&v| v == 0.0));

        let up = random(&[2, 4], &mut rng);
        let g = lora_vjp(&layer, &x, &up).unwrap();
        // with B = 0 only the base path reaches x and A gets nothing
        let mut base_dx = vec![0.0; 8];
        gemm(up.data(), layer.base.data(), 2, 4, 4, &mut base_dx);
        assert_eq!(g.x.data(), base_dx.as_slice());
        assert!(g.a.data().iter().all(|&v| v == 0.0));
        assert!(g.b.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(lora_parameter_count(&LoraConfig::default(), 768, 768), 294_912);
        let one = LoraConfig { rank: 1, targets: [Target::Query].into(), num_layers: 1, alpha: None };
        assert_eq!(lora_parameter_count(&one, 4, 4), 8);
        let none = LoraConfig { num_layers: 0, ..LoraConfig::default() };
        assert_eq!(lora_parameter_count(&none, 768, 768), 0);
        assert!(LoraConfig { rank: 0, ..LoraConfig::default() }.validate().is_err());
        assert!(LoraConfig { targets: BTreeSet::new(), ..LoraConfig::default() }.validate().is_err());
    }

    #[test]
    fn factored_matches_dense_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (d, k) = (rng.random_range(1..10), rng.random_range(1..10));
            let r = rng.random_range(1..=d.min(k));
            let f = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
            let layer = LoraLayer::new(f(&[d, k], &mut rng), f(&[r, k], &mut rng), f(&[d, r], &mut rng), 2.0).unwrap();
            let x = f(&[3, k], &mut rng);
            let h = lora_apply(&layer, &x).unwrap();
            let w = layer.materialize();
            let mut dense = vec![0.0f32; 3 * d];
            gemm_nt(x.data(), w.data(), 3, k, d, &mut dense);
            let scale = dense.iter().fold(1.0f32, |m, v| m.max(v.abs()));
            for (a, b) in h.data().iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-5 * scale);
            }
        }
    }

    #[test]
    fn ids_disjoint_from_adapter() {
        let cfg = LoraConfig::default();
        let lora: BTreeSet<_> = cfg.trainable_ids().into_iter().collect();
        let dsga: BTreeSet<_> = crate::dsga::trainable_ids(12).into_iter().collect();
        assert_eq!(lora.len(), 48);
        assert!(lora.is_disjoint(&dsga));
    }

    #[test]
    fn shape_errors() {
        assert!(LoraLayer::new(Tensor::<f64>::zeros(&[3, 3]), Tensor::zeros(&[4, 3]), Tensor::zeros(&[3, 4]), 1.0).is_err());
        let layer = LoraLayer::new(Tensor::<f64>::zeros(&[3, 2]), Tensor::zeros(&[1, 2]), Tensor::zeros(&[3, 1]), 1.0).unwrap();
        assert!(lora_apply(&layer, &Tensor::zeros(&[2, 3])).is_err());
    }
}
