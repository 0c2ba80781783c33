use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_json, BackboneProfile, PipelineConfig};
use crate::dsga::{dsga_forward, DsgaConfig, DsgaParams};
use crate::error::{Error, Result};
use crate::lora::{lora_apply, LoraConfig, LoraLayer};
use crate::loss::combined_loss;
use crate::metrics::{evaluate_saliency, instance_scores};
use crate::numerics::{tns, Tensor};
use crate::prompt::{
    dedup_indices, generate_prompts, write_gray, write_prompts, BinaryMask, Manifest, ManifestEntry, PromptConfig,
    ScoredInstance,
};

use super::stage::flood_fill;

const WIDTH: usize = 96;
const HEIGHT: usize = 64;
const GRID: usize = 16;
const STRICT_IOU: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub blobs: usize,
    pub prompts: usize,
    pub candidates: usize,
    pub kept: usize,
    pub kept_strict: usize,
    pub s_measure: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub mae: f64,
    pub ap50: f64,
    pub matched_iou_mean: f64,
    pub loss_total: f64,
}

fn demo_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        dsga: DsgaConfig { k_max: 4, seed, ..DsgaConfig::new(8) },
        lora: LoraConfig { rank: 2, num_layers: 1, ..LoraConfig::default() },
        prompt: PromptConfig { grid_size: GRID, ..PromptConfig::default() },
        backbone_profile: BackboneProfile { name: "toy".into(), layers: 1, embed_dim: 8, params_frozen: 64 },
        ..PipelineConfig::default()
    }
}

/// Non-overlapping squares with at least a two-pixel gap and a free row below.
fn place_blobs(rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let target = rng.random_range(3..=5);
    let mut blobs: Vec<(usize, usize, usize)> = Vec::new();
    while blobs.len() < target {
        let s = rng.random_range(8..=14);
        let x = rng.random_range(1..WIDTH - s - 1);
        let y = rng.random_range(1..HEIGHT - s - 2);
        let clear = blobs.iter().all(|&(bx, by, bs)| x + s + 2 <= bx || bx + bs + 2 <= x || y + s + 3 <= by || by + bs + 3 <= y);
        if clear {
            blobs.push((x, y, s));
        }
    }
    blobs
}

fn square(x0: usize, y0: usize, s: usize, extra_rows: usize) -> BinaryMask {
    BinaryMask::from_fn(WIDTH, HEIGHT, |x, y| (x0..x0 + s).contains(&x) && (y0..y0 + s + extra_rows).contains(&y))
        .expect("fixed dims")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs every stage on synthetic data and writes each intermediate artifact
/// under `out`. Output bytes depend only on `seed`.
pub fn demo_synthetic(seed: u64, out: &Path) -> Result<DemoSummary> {
    let cfg = demo_config(seed);
    cfg.validate()?;
    mkdir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // stage 1: adapter and low-rank update on a toy embedding field
    let field = Tensor::<f32>::from_fn(&[1, 6, 6, 8], |_| rng.random_range(-1.0..1.0));
    let params = DsgaParams::<f32>::init(&cfg.dsga, &mut rng);
    let (adapted, graph) = dsga_forward(&field, &params, &cfg.dsga)?;
    tns::write(&out.join("field.tns"), &field)?;
    params.save_bundle(&out.join("dsga_params"))?;
    tns::write(&out.join("dsga_out.tns"), &adapted)?;
    write_json(&out.join("graph.json"), &graph.to_json())?;

    let lim = 1.0 / (8f32).sqrt();
    let base = Tensor::<f32>::from_fn(&[8, 8], |_| rng.random_range(-lim..lim));
    let mut layer = LoraLayer::init(base, cfg.lora.rank, cfg.lora.alpha() as f32, &mut rng)?;
    layer.b = Tensor::from_fn(&[8, cfg.lora.rank], |_| rng.random_range(-0.1..0.1));
    let lora_out = lora_apply(&layer, &adapted.reshape(&[36, 8])?)?;
    mkdir(&out.join("lora"))?;
    tns::write(&out.join("lora/w0.tns"), &layer.base)?;
    tns::write(&out.join("lora/a.tns"), &layer.a)?;
    tns::write(&out.join("lora/b.tns"), &layer.b)?;
    tns::write(&out.join("lora_out.tns"), &lora_out)?;

    // foreground: the prediction equals the ground truth by construction
    let blobs = place_blobs(&mut rng);
    let gt = BinaryMask::from_fn(WIDTH, HEIGHT, |x, y| {
        blobs.iter().any(|&(bx, by, s)| (bx..bx + s).contains(&x) && (by..by + s).contains(&y))
    })?;
    gt.write(&out.join("gt.pgm"))?;
    gt.write(&out.join("fg.pgm"))?;
    let sal = Tensor::new(vec![HEIGHT, WIDTH], gt.to_f64())?;
    write_gray(&out.join("saliency.pgm"), WIDTH, HEIGHT, sal.data())?;

    // stage 2: prompts, candidates, dedup
    let prompts = generate_prompts(&gt, &cfg.prompt)?;
    write_prompts(&out.join("prompts.jsonl"), &prompts)?;
    let mut candidates = Vec::new();
    let mut sources = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        if let Some(m) = flood_fill(&gt, p.x, p.y) {
            candidates.push(ScoredInstance::new(m, 0.5 + 0.5 * p.confidence, Some(*p))?);
            sources.push(Some(i));
        }
    }
    // one-row-taller variant of each blob: IoU s/(s+1), between the two thresholds
    for &(x, y, s) in &blobs {
        let conf = prompts
            .iter()
            .filter(|p| (x..x + s).contains(&p.x) && (y..y + s).contains(&p.y))
            .map(|p| p.confidence)
            .fold(0.0, f64::max);
        candidates.push(ScoredInstance::new(square(x, y, s, 1), 0.4 * conf, None)?);
        sources.push(None);
    }
    mkdir(&out.join("candidates"))?;
    let mut entries = Vec::new();
    for (i, (c, src)) in candidates.iter().zip(&sources).enumerate() {
        let name = format!("candidates/cand_{i:04}.pgm");
        c.mask.write(&out.join(&name))?;
        entries.push(ManifestEntry { mask: name.into(), score: Some(c.score), prompt: *src });
    }
    let manifest = Manifest { instances: entries, count: None };
    manifest.write(&out.join("candidates.json"))?;

    let subset = |idx: &[usize]| Manifest {
        instances: idx.iter().map(|&i| manifest.instances[i].clone()).collect(),
        count: Some(idx.len()),
    };
    let kept = dedup_indices(&candidates, cfg.dedup_iou)?;
    let kept_strict = dedup_indices(&candidates, STRICT_IOU)?;
    subset(&kept).write(&out.join("kept.json"))?;
    subset(&kept_strict).write(&out.join("kept_strict.json"))?;

    // evaluation
    mkdir(&out.join("gt_instances"))?;
    let mut gt_entries = Vec::new();
    let mut gt_masks = Vec::new();
    for (i, &(x, y, s)) in blobs.iter().enumerate() {
        let name = format!("gt_instances/gt_{i:02}.pgm");
        let m = square(x, y, s, 0);
        m.write(&out.join(&name))?;
        gt_entries.push(ManifestEntry { mask: name.into(), score: None, prompt: None });
        gt_masks.push(m);
    }
    Manifest { instances: gt_entries, count: Some(blobs.len()) }.write(&out.join("gt_instances.json"))?;

    let mut report = evaluate_saliency(&sal, &gt)?;
    report.threshold_curve.clear();
    write_json(&out.join("metrics_saliency.json"), &report)?;
    let kept_instances: Vec<ScoredInstance> = kept.iter().map(|&i| candidates[i].clone()).collect();
    let inst = instance_scores(&kept_instances, &gt_masks)?;
    write_json(&out.join("metrics_instances.json"), &inst)?;
    let loss = combined_loss(&sal, &gt, &cfg.loss.weights, &cfg.loss.hyper)?;
    write_json(&out.join("loss.json"), &loss)?;

    let summary = DemoSummary {
        seed,
        blobs: blobs.len(),
        prompts: prompts.len(),
        candidates: candidates.len(),
        kept: kept.len(),
        kept_strict: kept_strict.len(),
        s_measure: report.s_measure,
        f_max: report.f_max,
        e_max: report.e_max,
        mae: report.mae,
        ap50: inst.ap50,
        matched_iou_mean: inst.matched_iou_mean,
        loss_total: loss.total,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
