//! End-to-end orchestration: configuration, parameter audit, the gradient
//! check harness, the foreground-to-instance stage transition, and a
//! self-contained synthetic demo.

mod demo;
mod gradcheck;
mod stage;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsga::{self, DsgaConfig};
use crate::error::{Error, Result};
use crate::lora::{lora_parameter_count, LoraConfig};
use crate::loss::LossConfig;
use crate::prompt::PromptConfig;

pub use demo::{demo_synthetic, DemoSummary};
pub use gradcheck::{gradcheck_all, GradcheckOptions, GradcheckReport, OpReport, GRADCHECK_TOLERANCE};
pub use stage::{flood_fill, realize_candidates, run_stage_transition, run_stage_transition_files, StageOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneProfile {
    pub name: String,
    pub layers: u64,
    pub embed_dim: usize,
    pub params_frozen: u64,
}

impl Default for BackboneProfile {
    fn default() -> Self {
        Self { name: "vit-base".into(), layers: 12, embed_dim: 768, params_frozen: 91_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dsga: DsgaConfig,
    pub lora: LoraConfig,
    pub prompt: PromptConfig,
    pub loss: LossConfig,
    pub dedup_iou: f64,
    pub backbone_profile: BackboneProfile,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dsga: DsgaConfig::default(),
            lora: LoraConfig::default(),
            prompt: PromptConfig::default(),
            loss: LossConfig::default(),
            dedup_iou: 0.75,
            backbone_profile: BackboneProfile::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsga.validate()?;
        self.lora.validate()?;
        self.prompt.validate()?;
        self.loss.validate()?;
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::config(format!("dedup IoU threshold {} outside (0, 1]", self.dedup_iou)));
        }
        let b = &self.backbone_profile;
        if self.dsga.embed_dim != b.embed_dim {
            return Err(Error::config(format!(
                "adapter width {} differs from backbone width {}",
                self.dsga.embed_dim, b.embed_dim
            )));
        }
        if self.lora.num_layers != b.layers {
            return Err(Error::config(format!(
                "LoRA layer count {} differs from backbone depth {}",
                self.lora.num_layers, b.layers
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Zero-depth profile; every count is zero.
    pub fn zero_layers() -> Self {
        let mut cfg = Self::default();
        cfg.backbone_profile.layers = 0;
        cfg.lora.num_layers = 0;
        cfg
    }
}

/// Published trainable-parameter figures, in millions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    pub dsga_m: f64,
    pub lora_m: f64,
    pub total_m: f64,
    pub percent_of_encoder: f64,
    pub percent_of_sam: f64,
}

pub const REFERENCE: ReferenceFigures = ReferenceFigures {
    dsga_m: 4.00,
    lora_m: 0.33,
    total_m: 4.33,
    percent_of_encoder: 4.83,
    percent_of_sam: 4.62,
};

/// Relative gap above which a count is flagged as disagreeing with the
/// published figure.
pub const AUDIT_TOLERANCE: f64 = 0.003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub dsga_params: u64,
    pub lora_params: u64,
    pub total_trainable: u64,
    pub frozen_total: u64,
    pub trainable_fraction: f64,
    pub reference: ReferenceFigures,
    pub dsga_relative_gap: f64,
    pub lora_relative_gap: f64,
    pub dsga_discrepancy: bool,
    pub lora_discrepancy: bool,
}

impl AuditReport {
    pub fn render(&self) -> String {
        let m = |v: u64| v as f64 / 1e6;
        let flag = |b: bool| if b { "  <- DISCREPANCY" } else { "" };
        let r = &self.reference;
        format!(
            "component        computed      (M)   published (M)   gap\n\
             dsga      {:>15} {:>8.3} {:>15.2} {:>+6.2}%{}\n\
             lora      {:>15} {:>8.3} {:>15.2} {:>+6.2}%{}\n\
             total     {:>15} {:>8.3} {:>15.2}\n\
             frozen backbone {:>9}\n\
             trainable / frozen: {:.2}% (published: {:.2}% of the encoder, {:.2}% of the full model)\n",
            self.dsga_params,
            m(self.dsga_params),
            r.dsga_m,
            100.0 * self.dsga_relative_gap,
            flag(self.dsga_discrepancy),
            self.lora_params,
            m(self.lora_params),
            r.lora_m,
            100.0 * self.lora_relative_gap,
            flag(self.lora_discrepancy),
            self.total_trainable,
            m(self.total_trainable),
            r.total_m,
            self.frozen_total,
            100.0 * self.trainable_fraction,
            r.percent_of_encoder,
            r.percent_of_sam,
        )
    }
}

pub fn audit_params(cfg: &PipelineConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let b = &cfg.backbone_profile;
    let dsga_params = dsga::parameter_count(&cfg.dsga, b.layers);
    let lora_params = lora_parameter_count(&cfg.lora, b.embed_dim as u64, b.embed_dim as u64);
    let total_trainable = dsga_params + lora_params;
    let gap = |v: u64, reference_m: f64| v as f64 / (reference_m * 1e6) - 1.0;
    let (dg, lg) = (gap(dsga_params, REFERENCE.dsga_m), gap(lora_params, REFERENCE.lora_m));
    Ok(AuditReport {
        dsga_params,
        lora_params,
        total_trainable,
        frozen_total: b.params_frozen,
        trainable_fraction: if b.params_frozen == 0 { 0.0 } else { total_trainable as f64 / b.params_frozen as f64 },
        reference: REFERENCE,
        dsga_relative_gap: dg,
        lora_relative_gap: lg,
        dsga_discrepancy: dg.abs() > AUDIT_TOLERANCE,
        lora_discrepancy: lg.abs() > AUDIT_TOLERANCE,
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
