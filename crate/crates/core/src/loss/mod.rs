//! Segmentation objective: focal, smoothed dice and boundary terms, their
//! weighted sum, and EMA rebalancing of the weights.

mod distance;
mod ema;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompt::BinaryMask;

pub use distance::{signed_distance, squared_edt, DistanceMap};
pub use ema::{ema_closed_form, ema_update, ContributionMode, EmaBalancer};

/// Probabilities are clamped to `[ε, 1 − ε]` inside the focal term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Focal, dice, boundary.
    pub lambda: [f64; 3],
    pub ema_beta: f64,
    pub ema_enabled: bool,
    pub contribution: ContributionMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0; 3], ema_beta: 0.9, ema_enabled: false, contribution: ContributionMode::ScaleNormalized }
    }
}

impl LossWeights {
    pub fn new(lambda: [f64; 3]) -> Result<Self> {
        let w = Self { lambda, ..Self::default() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative, got {:?}", self.lambda)));
        }
        if self.lambda.iter().all(|&l| l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::config(format!("EMA beta {} outside [0, 1)", self.ema_beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyper {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self { focal_gamma: 2.0, focal_alpha: 0.25, dice_smooth: 1.0 }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::config(format!("focal gamma {} must be non-negative", self.focal_gamma)));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config(format!("focal alpha {} outside [0, 1]", self.focal_alpha)));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::config(format!("dice smoothing {} must be positive", self.dice_smooth)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub hyper: LossHyper,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.hyper.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    pub boundary: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 3] {
        [self.focal, self.dice, self.boundary]
    }
}

/// Checks `pred` is an `[H, W]` probability map matching `gt`.
fn check(pred: &Tensor<f64>, h: usize, w: usize, op: &'static str) -> Result<()> {
    if pred.shape() != [h, w] {
        return Err(Error::ShapeMismatch { op, left: pred.shape().to_vec(), right: vec![h, w] });
    }
    if let Some(p) = pred.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("{op}: probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn focal_terms(p: f64, fg: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let inside = pc == p;
    // loss as a function of p_t, then chain through p_t = p or 1 - p
    let (pt, a, sign) = if fg { (pc, alpha, 1.0) } else { (1.0 - pc, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let loss = -a * q.powf(gamma) * pt.ln();
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    let dpt = a * (dq * pt.ln() - q.powf(gamma) / pt);
    (loss, if inside { sign * dpt } else { 0.0 })
}

pub fn focal_loss(pred: &Tensor<f64>, gt: &BinaryMask, gamma: f64, alpha: f64) -> Result<f64> {
    check(pred, gt.height(), gt.width(), "focal_loss")?;
    let sum: f64 = pred.data().iter().zip(gt.bits()).map(|(&p, &g)| focal_terms(p, g, gamma, alpha).0).sum();
    Ok(sum / pred.len() as f64)
}

fn dice_sums(pred: &[f64], gt: &[bool]) -> (f64, f64, f64) {
    pred.iter().zip(gt).fold((0.0, 0.0, 0.0), |(i, p, g), (&v, &b)| {
        let t = if b { 1.0 } else { 0.0 };
        (i + v * t, p + v, g + t)
    })
}

pub fn dice_loss(pred: &Tensor<f64>, gt: &BinaryMask, smooth: f64) -> Result<f64> {
    check(pred, gt.height(), gt.width(), "dice_loss")?;
    if !(smooth > 0.0) {
        return Err(Error::config("dice smoothing must be positive"));
    }
    let (i, p, g) = dice_sums(pred.data(), gt.bits());
    Ok(1.0 - (2.0 * i + smooth) / (p + g + smooth))
}

pub fn boundary_loss(pred: &Tensor<f64>, dist: &DistanceMap) -> Result<f64> {
    check(pred, dist.height, dist.width, "boundary_loss")?;
    let sum: f64 = pred.data().iter().zip(&dist.phi).map(|(p, d)| p * d).sum();
    Ok(sum / pred.len() as f64)
}

pub fn combined_loss(pred: &Tensor<f64>, gt: &BinaryMask, weights: &LossWeights, hyper: &LossHyper) -> Result<LossBreakdown> {
    weights.validate()?;
    hyper.validate()?;
    let focal = focal_loss(pred, gt, hyper.focal_gamma, hyper.focal_alpha)?;
    let dice = dice_loss(pred, gt, hyper.dice_smooth)?;
    let boundary = boundary_loss(pred, &signed_distance(gt))?;
    let [l1, l2, l3] = weights.lambda;
    let total = l1 * focal + l2 * dice + l3 * boundary;
    if !total.is_finite() {
        return Err(Error::NonFinite { stage: "combined_loss".into() });
    }
    Ok(LossBreakdown { total, focal, dice, boundary })
}

/// Analytic `∂ total / ∂ p` per pixel, shaped like `pred`.
pub fn loss_grads(pred: &Tensor<f64>, gt: &BinaryMask, weights: &LossWeights, hyper: &LossHyper) -> Result<Tensor<f64>> {
    weights.validate()?;
    hyper.validate()?;
    check(pred, gt.height(), gt.width(), "loss_grads")?;
    let n = pred.len() as f64;
    let [l1, l2, l3] = weights.lambda;
    let dist = signed_distance(gt);
    let (i, p, g) = dice_sums(pred.data(), gt.bits());
    let den = p + g + hyper.dice_smooth;
    let num = 2.0 * i + hyper.dice_smooth;
    let grad = pred
        .data()
        .iter()
        .zip(gt.bits())
        .zip(&dist.phi)
        .map(|((&v, &b), &phi)| {
            let focal = focal_terms(v, b, hyper.focal_gamma, hyper.focal_alpha).1 / n;
            let t = if b { 1.0 } else { 0.0 };
            let dice = -(2.0 * t * den - num) / (den * den);
            l1 * focal + l2 * dice + l3 * phi / n
        })
        .collect();
    let out = Tensor::from_parts(pred.shape().to_vec(), grad);
    out.ensure_finite("loss_grads")?;
    Ok(out)
}
