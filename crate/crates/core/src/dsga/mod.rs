//! Dynamic similarity-graph bottleneck adapter.
//!
//! The adapter reduces a `[B, H, W, D]` embedding field to `D_hidden`
//! channels, propagates the reduced features over a rank-weighted top-k
//! similarity graph, mixes in 3×3 pooled context through a capped gate and
//! projects back up onto a residual connection:
//!
//! ```text
//! Z   = GELU(flatten(x)·down + b_down)
//! G   = A(Z)·Z                      (A built from tanh cosine similarity)
//! F   = G·W
//! Z'  = (1 − g)·F + g·pool(F)       (g ≤ 0.5)
//! out = unflatten(drop(Z')·up + b_up) + x
//! ```

mod forward;
mod graph;
mod pool;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{tns, Real, Tensor};

pub use forward::{dsga_forward, dsga_vjp, DsgaVjp};
pub use graph::{
    adaptive_k, build_graph, init_rank_logits, init_theta_k, propagate, rank_weights,
    similarity_matrix, similarity_vjp, ElementGraph, SimilarityGraph,
};
pub use pool::{dual_pool, gated_residual, hybrid_pool, residual_gate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsgaConfig {
    pub embed_dim: usize,
    pub reduction_ratio: f64,
    pub k_max: usize,
    pub decay_exponent: f64,
    pub dropout_prob: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Selects the dropout stream when several adapters share a seed.
    pub layer_index: u64,
}

impl Default for DsgaConfig {
    fn default() -> Self {
        Self {
            embed_dim: 768,
            reduction_ratio: 0.25,
            k_max: 8,
            decay_exponent: 2.0,
            dropout_prob: 0.1,
            mode: Mode::Eval,
            seed: 0,
            layer_index: 0,
        }
    }
}

impl DsgaConfig {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            ..Self::default()
        }
    }

    /// `⌊α·D⌋`.
    pub fn hidden_dim(&self) -> usize {
        (self.reduction_ratio * self.embed_dim as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if !(self.reduction_ratio > 0.0 && self.reduction_ratio <= 1.0) {
            return Err(Error::config(format!(
                "reduction_ratio {} outside (0, 1]",
                self.reduction_ratio
            )));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::config(format!(
                "hidden dimension ⌊{}·{}⌋ is zero",
                self.reduction_ratio, self.embed_dim
            )));
        }
        if self.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.decay_exponent > 0.0 && self.decay_exponent.is_finite()) {
            return Err(Error::config("decay_exponent must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    /// Trainable scalars in one adapter.
    pub fn layer_parameter_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        let h = self.hidden_dim() as u64;
        d * h + h + h * d + d + h * h + self.k_max as u64 + 3
    }
}

/// Trainable parameters across `num_layers` adapters.
pub fn parameter_count(cfg: &DsgaConfig, num_layers: u64) -> u64 {
    num_layers * cfg.layer_parameter_count()
}

/// Identifiers of every trainable tensor, e.g. `dsga.layer03.fusion.w`.
pub fn trainable_ids(num_layers: u64) -> Vec<String> {
    (0..num_layers)
        .flat_map(|l| BUNDLE_FILES.iter().map(move |f| format!("dsga.layer{l:02}.{f}")))
        .collect()
}

/// Adapter weights. The same layout doubles as the cotangent container.
#[derive(Clone, Debug, PartialEq)]
pub struct DsgaParams<T> {
    /// `[D, D_hidden]`
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    /// `[D_hidden, D]`
    pub up_w: Tensor<T>,
    pub up_b: Tensor<T>,
    /// `[D_hidden, D_hidden]`
    pub fusion_w: Tensor<T>,
    pub rank_logits: Tensor<T>,
    pub theta_k: T,
    pub w_p: T,
    pub w_n: T,
}

/// File names inside a parameter bundle directory, in flattening order.
pub const BUNDLE_FILES: [&str; 9] = [
    "down.w",
    "down.b",
    "up.w",
    "up.b",
    "fusion.w",
    "rank_logits",
    "theta_k",
    "w_p",
    "w_n",
];

impl<T: Real> DsgaParams<T> {
    /// All-zero weights with initial rank logits and `θ_k`.
    pub fn zeros(cfg: &DsgaConfig) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        Self {
            down_w: Tensor::zeros(&[d, h]),
            down_b: Tensor::zeros(&[h]),
            up_w: Tensor::zeros(&[h, d]),
            up_b: Tensor::zeros(&[d]),
            fusion_w: Tensor::zeros(&[h, h]),
            rank_logits: Tensor::from_parts(
                vec![cfg.k_max],
                init_rank_logits(cfg.k_max, cfg.decay_exponent),
            ),
            theta_k: init_theta_k(cfg.k_max),
            w_p: T::zero(),
            w_n: T::zero(),
        }
    }

    /// Linear layers drawn from `U(−1/√fan_in, 1/√fan_in)`, graph parameters
    /// at their documented initial values.
    pub fn init<R: Rng>(cfg: &DsgaConfig, rng: &mut R) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
        };
        let down_w = uniform(&[d, h], d);
        let down_b = uniform(&[h], d);
        let up_w = uniform(&[h, d], h);
        let up_b = uniform(&[d], h);
        let fusion_w = uniform(&[h, h], h);
        Self {
            down_w,
            down_b,
            up_w,
            up_b,
            fusion_w,
            ..Self::zeros(cfg)
        }
    }

    pub fn validate(&self, cfg: &DsgaConfig) -> Result<()> {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        let expect: [(&str, &Tensor<T>, Vec<usize>); 6] = [
            ("down.w", &self.down_w, vec![d, h]),
            ("down.b", &self.down_b, vec![h]),
            ("up.w", &self.up_w, vec![h, d]),
            ("up.b", &self.up_b, vec![d]),
            ("fusion.w", &self.fusion_w, vec![h, h]),
            ("rank_logits", &self.rank_logits, vec![cfg.k_max]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("parameter {name}"),
                });
            }
        }
        if ![self.theta_k, self.w_p, self.w_n].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "scalar parameters".into(),
            });
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named tensors in [`BUNDLE_FILES`] order; scalars become shape `[]`.
    pub fn tensors(&self) -> Vec<(&'static str, Tensor<T>)> {
        vec![
            (BUNDLE_FILES[0], self.down_w.clone()),
            (BUNDLE_FILES[1], self.down_b.clone()),
            (BUNDLE_FILES[2], self.up_w.clone()),
            (BUNDLE_FILES[3], self.up_b.clone()),
            (BUNDLE_FILES[4], self.fusion_w.clone()),
            (BUNDLE_FILES[5], self.rank_logits.clone()),
            (BUNDLE_FILES[6], Tensor::scalar(self.theta_k)),
            (BUNDLE_FILES[7], Tensor::scalar(self.w_p)),
            (BUNDLE_FILES[8], Tensor::scalar(self.w_n)),
        ]
    }

    /// Concatenation of all parameters in bundle order.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.into_data())
            .collect()
    }

    /// Inverse of [`Self::to_flat`] for the shapes implied by `cfg`.
    pub fn from_flat(cfg: &DsgaConfig, flat: &[T]) -> Result<Self> {
        let template = Self::zeros(cfg);
        let mut at = 0;
        let mut parts = Vec::new();
        for (name, t) in template.tensors() {
            let end = at + t.len();
            let slice = flat.get(at..end).ok_or_else(|| {
                Error::invalid(format!("flat parameter vector too short at {name}"))
            })?;
            parts.push(Tensor::from_parts(t.shape().to_vec(), slice.to_vec()));
            at = end;
        }
        if at != flat.len() {
            return Err(Error::invalid("flat parameter vector too long"));
        }
        Self::from_parts(parts)
    }

    fn from_parts(parts: Vec<Tensor<T>>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("nine parameter tensors");
        Ok(Self {
            down_w: next(),
            down_b: next(),
            up_w: next(),
            up_b: next(),
            fusion_w: next(),
            rank_logits: next(),
            theta_k: next().item()?,
            w_p: next().item()?,
            w_n: next().item()?,
        })
    }

    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.tensors() {
            tns::write(&dir.join(name), &t)?;
        }
        Ok(())
    }

    pub fn load_bundle(dir: &Path, cfg: &DsgaConfig) -> Result<Self> {
        let parts = BUNDLE_FILES
            .iter()
            .map(|name| tns::read::<T>(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let params = Self::from_parts(parts)?;
        params.validate(cfg)?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_base_count() {
        let cfg = DsgaConfig::new(768);
        assert_eq!(cfg.hidden_dim(), 192);
        assert_eq!(parameter_count(&cfg, 12), 3_992_964);
        assert_eq!(parameter_count(&cfg, 0), 0);
    }

    #[test]
    fn tiny_count() {
        let cfg = DsgaConfig {
            k_max: 1,
            ..DsgaConfig::new(4)
        };
        assert_eq!(cfg.hidden_dim(), 1);
        assert_eq!(parameter_count(&cfg, 1), 18);
        assert_eq!(DsgaParams::<f64>::zeros(&cfg).count(), 18);
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(DsgaConfig::new(3).validate().is_err());
        assert!(DsgaConfig { k_max: 0, ..DsgaConfig::new(8) }.validate().is_err());
        assert!(DsgaConfig { dropout_prob: 1.0, ..DsgaConfig::new(8) }.validate().is_err());
        assert!(DsgaConfig::new(8).validate().is_ok());
    }

    #[test]
    fn flat_roundtrip_and_bundle() {
        let cfg = DsgaConfig { k_max: 3, ..DsgaConfig::new(8) };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let p: DsgaParams<f64> = DsgaParams::init(&cfg, &mut rng);
        assert_eq!(DsgaParams::from_flat(&cfg, &p.to_flat()).unwrap(), p);
        assert!(DsgaParams::<f64>::from_flat(&cfg, &p.to_flat()[1..]).is_err());

        let dir = tempfile::tempdir().unwrap();
        p.save_bundle(dir.path()).unwrap();
        let back = DsgaParams::<f64>::load_bundle(dir.path(), &cfg).unwrap();
        assert_eq!(back, p);
        let wrong = DsgaConfig { k_max: 4, ..cfg };
        assert!(DsgaParams::<f64>::load_bundle(dir.path(), &wrong).is_err());
    }
}
