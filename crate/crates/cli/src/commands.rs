use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphadapt::dsga::{dsga_forward, DsgaConfig, DsgaParams};
use graphadapt::loss::{combined_loss, loss_grads, EmaBalancer, LossHyper, LossWeights};
use graphadapt::lora::{lora_apply, LoraLayer};
use graphadapt::metrics::{evaluate_batch, instance_scores, MetricReport};
use graphadapt::numerics::tns;
use graphadapt::pipeline::{
    audit_params, demo_synthetic, gradcheck_all, run_stage_transition_files, GradcheckOptions, PipelineConfig,
};
use graphadapt::prompt::{
    dedup_indices, generate_prompts, write_prompts, BinaryMask, Graymap, Manifest, PromptConfig,
};
use graphadapt::{Dtype, Real, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::Exit;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Dsga(DsgaCommand::Forward(a)) => dsga_forward_cmd(a),
        Command::Lora(LoraCommand::Apply(a)) => lora_apply_cmd(a),
        Command::Prompts(PromptsCommand::Generate(a)) => prompts_generate(a),
        Command::Instances(InstancesCommand::Dedup(a)) => instances_dedup(a),
        Command::Loss(LossCommand::Eval(a)) => loss_eval(a),
        Command::Loss(LossCommand::EmaSim(a)) => ema_sim(a),
        Command::Metrics(MetricsCommand::Saliency(a)) => metrics_saliency(a),
        Command::Metrics(MetricsCommand::Instances(a)) => metrics_instances(a),
        Command::Audit(AuditCommand::Params(a)) => audit(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Demo(a) => demo(a),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline_run(a),
    }
}

fn emit<S: Serialize>(value: &S, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Accepts a bare adapter configuration or a pipeline configuration.
fn load_dsga_config(path: &Path) -> Result<DsgaConfig> {
    let value: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Exit::validation(format!("{}: {e}", path.display())))?;
    let cfg = if value.get("dsga").is_some() {
        PipelineConfig::from_json(&value.to_string())?.dsga
    } else {
        serde_json::from_value(value).map_err(|e| Exit::validation(format!("{}: {e}", path.display())))?
    };
    Ok(cfg)
}

fn forward_typed<T: Real>(a: &DsgaForward, cfg: &DsgaConfig) -> Result<()> {
    let x: Tensor<T> = tns::read(&a.input)?;
    let params = DsgaParams::<T>::load_bundle(&a.params, cfg)?;
    let (y, graph) = dsga_forward(&x, &params, cfg)?;
    tns::write(&a.output, &y)?;
    if let Some(g) = &a.emit_graph {
        emit(&graph.to_json(), Some(g))?;
    }
    Ok(())
}

fn dsga_forward_cmd(a: DsgaForward) -> Result<()> {
    let dtype = tns::read_dtype(&a.input)?;
    let mut cfg = match &a.config {
        Some(p) => load_dsga_config(p)?,
        None => {
            let x: Tensor<f64> = tns::read(&a.input)?;
            DsgaConfig::new(*x.shape().last().unwrap_or(&0))
        }
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    match dtype {
        Dtype::F32 => forward_typed::<f32>(&a, &cfg),
        Dtype::F64 => forward_typed::<f64>(&a, &cfg),
    }
}

fn lora_typed<T: Real>(a: &LoraApply) -> Result<()> {
    let layer = LoraLayer::new(
        tns::read::<T>(&a.base)?,
        tns::read::<T>(&a.a)?,
        tns::read::<T>(&a.b)?,
        T::of(a.alpha.unwrap_or(a.rank as f64)),
    )?;
    if layer.rank() != a.rank {
        return Err(Exit::validation(format!("--rank {} but A has {} rows", a.rank, layer.rank())).into());
    }
    let x: Tensor<T> = tns::read(&a.input)?;
    tns::write(&a.output, &lora_apply(&layer, &x)?)?;
    Ok(())
}

fn lora_apply_cmd(a: LoraApply) -> Result<()> {
    if a.rank == 0 {
        bail!(Exit::validation("--rank must be positive"));
    }
    if let Some(alpha) = a.alpha {
        if !alpha.is_finite() {
            bail!(Exit::validation("--alpha must be finite"));
        }
    }
    match tns::read_dtype(&a.input)? {
        Dtype::F32 => lora_typed::<f32>(&a),
        Dtype::F64 => lora_typed::<f64>(&a),
    }
}

fn prompts_generate(a: PromptsGenerate) -> Result<()> {
    let cfg = PromptConfig { grid_size: a.grid, saliency_threshold: a.threshold, n_min: a.nmin, n_max: a.nmax };
    cfg.validate()?;
    let mask = BinaryMask::read(&a.mask)?;
    let prompts = generate_prompts(&mask, &cfg)?;
    write_prompts(&a.out, &prompts)?;
    log::info!("{} prompts from {}", prompts.len(), a.mask.display());
    Ok(())
}

fn instances_dedup(a: InstancesDedup) -> Result<()> {
    if !(0.0..=1.0).contains(&a.iou_threshold) {
        bail!(Exit::validation(format!("--iou-threshold {} outside [0, 1]", a.iou_threshold)));
    }
    let manifest = Manifest::read(&a.manifest)?;
    let candidates = manifest.load_instances(&a.manifest, None)?;
    let kept = dedup_indices(&candidates, a.iou_threshold)?;
    let rebased = manifest.rebased(&a.manifest, &a.out);
    let out = Manifest {
        instances: kept.iter().map(|&i| rebased.instances[i].clone()).collect(),
        count: Some(kept.len()),
    };
    out.write(&a.out)?;
    Ok(())
}

fn parse_weights(s: &str) -> Result<[f64; 3]> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Exit::validation(format!("weights `{s}`: {e}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Exit::validation(format!("weights `{s}`: expected three values")).into())
}

fn is_graymap(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "pbm")
    )
}

/// Probability map `[H, W]` from TNS1 or a graymap scaled to `[0, 1]`.
fn read_probability_map(path: &Path) -> Result<Tensor<f64>> {
    if is_graymap(path) {
        let g = Graymap::read(path)?;
        return Ok(Tensor::new(vec![g.height, g.width], g.unit_values())?);
    }
    let t: Tensor<f64> = tns::read(path)?;
    let t = match t.shape() {
        [_, _] => t,
        [1, h, w] | [h, w, 1] => {
            let shape = [*h, *w];
            t.reshape(&shape)?
        }
        other => bail!(Exit::validation(format!("{}: expected an [H, W] map, got {other:?}", path.display()))),
    };
    Ok(t)
}

fn check_dims(pred: &Tensor<f64>, gt: &BinaryMask, name: &Path) -> Result<()> {
    if pred.shape() != [gt.height(), gt.width()] {
        bail!(Exit::validation(format!(
            "{}: prediction {:?} does not match ground truth [{}, {}]",
            name.display(),
            pred.shape(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn loss_eval(a: LossEval) -> Result<()> {
    let weights = LossWeights::new(parse_weights(&a.weights)?)?;
    let hyper = LossHyper { focal_gamma: a.focal_gamma, focal_alpha: a.focal_alpha, dice_smooth: a.dice_smooth };
    hyper.validate()?;
    let pred = read_probability_map(&a.pred)?;
    let gt = BinaryMask::read(&a.gt)?;
    check_dims(&pred, &gt, &a.pred)?;
    let report = combined_loss(&pred, &gt, &weights, &hyper)?;
    if let Some(g) = &a.grad {
        tns::write(g, &loss_grads(&pred, &gt, &weights, &hyper)?)?;
    }
    emit(&report, a.out.as_deref())
}

fn parse_triple(line: &str, lineno: usize) -> Result<[f64; 3]> {
    let bad = |detail: String| Exit::validation(format!("trace line {lineno}: {detail}"));
    let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let nums: Vec<Option<f64>> = match &value {
        Value::Array(xs) => xs.iter().map(Value::as_f64).collect(),
        Value::Object(o) => ["focal", "dice", "boundary"].iter().map(|k| o.get(*k).and_then(Value::as_f64)).collect(),
        _ => vec![],
    };
    match nums.as_slice() {
        [Some(a), Some(b), Some(c)] => Ok([*a, *b, *c]),
        _ => Err(bad("expected three numbers".into()).into()),
    }
}

#[derive(Serialize)]
struct EmaRow {
    step: usize,
    lambda: [f64; 3],
}

fn ema_sim(a: EmaSim) -> Result<()> {
    let weights = LossWeights {
        lambda: parse_weights(&a.weights)?,
        ema_beta: a.beta,
        ema_enabled: true,
        ..LossWeights::default()
    };
    weights.validate()?;
    let mut balancer = EmaBalancer::new(weights.clone())?;
    let mut current = weights;
    let mut out = String::new();
    for (i, line) in read_text(&a.trace)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_triple(line, i + 1)?;
        let lambda = if a.normalize {
            balancer.step(values)?
        } else {
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                bail!(Exit::validation(format!("trace line {}: contributions must be finite and non-negative", i + 1)));
            }
            current = graphadapt::loss::ema_update(&current, values)?;
            current.lambda
        };
        out.push_str(&serde_json::to_string(&EmaRow { step: i + 1, lambda })?);
        out.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn stem_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pgm" | "pbm" | "tns")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            files.push((stem.to_owned(), path));
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Serialize)]
struct SaliencyRow {
    name: String,
    #[serde(flatten)]
    report: MetricReport,
}

fn metrics_saliency(a: MetricsSaliency) -> Result<()> {
    let preds = stem_files(&a.pred_dir)?;
    let gts = stem_files(&a.gt_dir)?;
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for (stem, gt_path) in gts.iter().filter(|(_, p)| is_graymap(p)) {
        let Some((_, pred_path)) = preds.iter().find(|(s, _)| s == stem) else {
            bail!(Exit::validation(format!("no prediction for ground truth {}", gt_path.display())));
        };
        let gt = BinaryMask::read(gt_path)?;
        let pred = read_probability_map(pred_path)?;
        check_dims(&pred, &gt, pred_path)?;
        if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(Exit::validation(format!("{}: saliency values outside [0, 1]", pred_path.display())));
        }
        names.push(stem.clone());
        pairs.push((pred, gt));
    }
    if pairs.is_empty() {
        bail!(Exit::validation(format!("no ground-truth masks in {}", a.gt_dir.display())));
    }
    let reports = evaluate_batch(&pairs)?;
    let mean = MetricReport::mean(&reports);
    let images: Vec<SaliencyRow> = names
        .into_iter()
        .zip(reports)
        .map(|(name, mut report)| {
            if !a.curves {
                report.threshold_curve.clear();
            }
            SaliencyRow { name, report }
        })
        .collect();
    emit(&json!({ "images": images, "mean": mean }), a.out.as_deref())
}

fn metrics_instances(a: MetricsInstances) -> Result<()> {
    let preds = Manifest::read(&a.pred_manifest)?.load_instances(&a.pred_manifest, None)?;
    let gts = Manifest::read(&a.gt_manifest)?.load_masks(&a.gt_manifest)?;
    emit(&instance_scores(&preds, &gts)?, a.out.as_deref())
}

fn audit(a: AuditParams) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    let report = audit_params(&cfg)?;
    if a.json {
        emit(&report, a.out.as_deref())
    } else {
        match &a.out {
            Some(p) => fs::write(p, report.render()).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{}", report.render()),
        }
        Ok(())
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = GradcheckOptions {
        seed: a.seed,
        instances: a.instances,
        batch: a.batch,
        max_nodes: a.max_nodes,
        max_dim: a.max_dim,
        corrupt: a.corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck_all(&opts)?;
    for op in &report.ops {
        println!(
            "{:<11} {} instances  {:>5} coords  {:>3} excluded  max rel err {:.3e}  {}",
            op.op,
            op.instances,
            op.coordinates,
            op.excluded,
            op.max_relative_error,
            if op.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(p) = &a.out {
        emit(&report, Some(p))?;
    }
    if !report.passed {
        bail!(Exit::numerical(format!("gradient check exceeded tolerance {:e}", report.tolerance)));
    }
    Ok(())
}

fn demo(a: DemoArgs) -> Result<()> {
    let summary = demo_synthetic(a.seed, &a.out)?;
    emit(&summary, None)
}

fn pipeline_run(a: PipelineRun) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    let out = run_stage_transition_files(&a.mask, a.candidates.as_deref(), &cfg, &a.out)?;
    emit(&json!({ "prompts": out.prompts.len(), "candidates": out.candidates.len(), "count": out.count() }), None)
}
