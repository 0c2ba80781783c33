use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::error::{Error, Result};

/// Sum the weights are rescaled to after every update.
pub const WEIGHT_TOTAL: f64 = 3.0;

/// How a raw component value becomes an EMA contribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionMode {
    /// `|v| / mean(|v|)` over all steps so far.
    #[default]
    ScaleNormalized,
    /// `|v|` as is.
    Raw,
}

/// `λ ← β·λ + (1 − β)·c`, rescaled so the weights sum to 3.
pub fn ema_update(weights: &LossWeights, contributions: [f64; 3]) -> Result<LossWeights> {
    if !(0.0..1.0).contains(&weights.ema_beta) {
        return Err(Error::config(format!("EMA beta {} outside [0, 1)", weights.ema_beta)));
    }
    if let Some(c) = contributions.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(if c.is_finite() {
            Error::invalid(format!("EMA contribution {c} is negative"))
        } else {
            Error::NonFinite { stage: "ema_update".into() }
        });
    }
    let b = weights.ema_beta;
    let mut lambda = [0.0; 3];
    for ((l, &prev), &c) in lambda.iter_mut().zip(&weights.lambda).zip(&contributions) {
        *l = b * prev + (1.0 - b) * c;
    }
    let sum: f64 = lambda.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::NonFinite { stage: "ema_update: weights collapsed to zero".into() });
    }
    lambda.iter_mut().for_each(|l| *l *= WEIGHT_TOTAL / sum);
    Ok(LossWeights { lambda, ..weights.clone() })
}

/// Weights after `k` updates with a constant contribution `c`, starting from
/// weights that already sum to 3. Each step then rescales by the same factor,
/// so `λ_k = a^k·λ_0 + (1 − a^k)·3c/Σc` with `a = 3β / (3β + (1 − β)Σc)`.
pub fn ema_closed_form(lambda0: [f64; 3], c: [f64; 3], beta: f64, k: u64) -> Result<[f64; 3]> {
    let s0: f64 = lambda0.iter().sum();
    if (s0 - WEIGHT_TOTAL).abs() > 1e-9 {
        return Err(Error::invalid(format!("initial weights sum to {s0}, expected 3")));
    }
    let sc: f64 = c.iter().sum();
    let denom = WEIGHT_TOTAL * beta + (1.0 - beta) * sc;
    if !(denom > 0.0) {
        return Err(Error::invalid("constant contribution collapses the weights"));
    }
    let a = WEIGHT_TOTAL * beta / denom;
    let ak = a.powf(k as f64);
    let mut out = lambda0;
    for (o, &ci) in out.iter_mut().zip(&c) {
        let target = if sc > 0.0 { WEIGHT_TOTAL * ci / sc } else { 0.0 };
        *o = ak * *o + (1.0 - ak) * target;
    }
    Ok(out)
}

/// Stateful driver that turns per-step component values into weight updates.
#[derive(Clone, Debug)]
pub struct EmaBalancer {
    weights: LossWeights,
    abs_sum: [f64; 3],
    steps: u64,
}

impl EmaBalancer {
    pub fn new(weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Self { weights, abs_sum: [0.0; 3], steps: 0 })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn contributions(&mut self, values: [f64; 3]) -> [f64; 3] {
        self.steps += 1;
        let mut c = [0.0; 3];
        for i in 0..3 {
            let v = values[i].abs();
            self.abs_sum[i] += v;
            c[i] = match self.weights.contribution {
                ContributionMode::Raw => v,
                ContributionMode::ScaleNormalized => {
                    let mean = self.abs_sum[i] / self.steps as f64;
                    if mean > 0.0 { v / mean } else { 1.0 }
                }
            };
        }
        c
    }

    /// Feeds one step of component values; a no-op when EMA is disabled.
    pub fn step(&mut self, values: [f64; 3]) -> Result<[f64; 3]> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "ema_update".into() });
        }
        if self.weights.ema_enabled {
            let c = self.contributions(values);
            self.weights = ema_update(&self.weights, c)?;
        }
        Ok(self.weights.lambda)
    }
}
