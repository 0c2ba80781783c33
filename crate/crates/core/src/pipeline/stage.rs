use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_json, PipelineConfig};
use crate::error::{Error, Result};
use crate::prompt::{
    dedup_indices, generate_prompts, write_prompts, BinaryMask, Manifest, ManifestEntry, PointPrompt, ScoredInstance,
};

/// 4-connected component of `mask` containing `(x, y)`, or `None` when that
/// pixel is background.
pub fn flood_fill(mask: &BinaryMask, x: usize, y: usize) -> Option<BinaryMask> {
    if x >= mask.width() || y >= mask.height() || !mask.get(x, y) {
        return None;
    }
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::empty(w, h).expect("same dims");
    let mut stack = vec![(x, y)];
    out.set(x, y, true);
    while let Some((cx, cy)) = stack.pop() {
        let around = [
            (cx.wrapping_sub(1), cy),
            (cx + 1, cy),
            (cx, cy.wrapping_sub(1)),
            (cx, cy + 1),
        ];
        for (nx, ny) in around {
            if nx < w && ny < h && mask.get(nx, ny) && !out.get(nx, ny) {
                out.set(nx, ny, true);
                stack.push((nx, ny));
            }
        }
    }
    Some(out)
}

/// Built-in realizer: one candidate per prompt, the foreground component
/// under it, scored by the prompt's confidence.
pub fn realize_candidates(mask: &BinaryMask, prompts: &[PointPrompt]) -> Vec<ScoredInstance> {
    prompts
        .iter()
        .filter_map(|p| {
            let m = flood_fill(mask, p.x, p.y)?;
            ScoredInstance::new(m, p.confidence, Some(*p)).ok()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub prompts: Vec<PointPrompt>,
    pub candidates: Vec<ScoredInstance>,
    /// Indices into `candidates`, in acceptance order.
    pub kept: Vec<usize>,
}

impl StageOutput {
    pub fn count(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_instances(&self) -> Vec<&ScoredInstance> {
        self.kept.iter().map(|&i| &self.candidates[i]).collect()
    }
}

/// Prompts from the foreground mask, candidates (external or realized by
/// flood fill), then deduplication. The kept count is the instance count.
pub fn run_stage_transition(
    mask: &BinaryMask,
    candidates: Option<Vec<ScoredInstance>>,
    cfg: &PipelineConfig,
) -> Result<StageOutput> {
    let prompts = generate_prompts(mask, &cfg.prompt)?;
    let candidates = match candidates {
        Some(c) => c,
        None => realize_candidates(mask, &prompts),
    };
    if let Some(bad) = candidates.iter().find(|c| !c.mask.same_dims(mask)) {
        return Err(Error::ShapeMismatch {
            op: "run_stage_transition",
            left: vec![mask.height(), mask.width()],
            right: vec![bad.mask.height(), bad.mask.width()],
        });
    }
    let kept = dedup_indices(&candidates, cfg.dedup_iou)?;
    Ok(StageOutput { prompts, candidates, kept })
}

#[derive(Serialize, Deserialize)]
struct CountReport {
    count: usize,
    prompts: usize,
    candidates: usize,
}

/// File-level wrapper. Writes `prompts.jsonl`, `kept.json` and `count.json`
/// into `out_dir`; realized candidate masks go to `out_dir/candidates/`.
pub fn run_stage_transition_files(
    mask_path: &Path,
    manifest_path: Option<&Path>,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<StageOutput> {
    cfg.validate()?;
    let mask = BinaryMask::read(mask_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (external, manifest) = match manifest_path {
        Some(p) => {
            let m = Manifest::read(p)?;
            let prompts = generate_prompts(&mask, &cfg.prompt)?;
            (Some(m.load_instances(p, Some(&prompts))?), Some((m, p)))
        }
        None => (None, None),
    };
    let out = run_stage_transition(&mask, external, cfg)?;
    write_prompts(&out_dir.join("prompts.jsonl"), &out.prompts)?;
    let kept_path = out_dir.join("kept.json");
    let kept_manifest = match manifest {
        Some((m, from)) => {
            let rebased = m.rebased(from, &kept_path);
            Manifest { instances: out.kept.iter().map(|&i| rebased.instances[i].clone()).collect(), count: Some(out.count()) }
        }
        None => {
            let dir = out_dir.join("candidates");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut entries = Vec::new();
            for (n, &i) in out.kept.iter().enumerate() {
                let c = &out.candidates[i];
                let name = format!("candidates/kept_{n:04}.pgm");
                c.mask.write(&out_dir.join(&name))?;
                let prompt = c.source_prompt.and_then(|p| out.prompts.iter().position(|q| *q == p));
                entries.push(ManifestEntry { mask: name.into(), score: Some(c.score), prompt });
            }
            Manifest { instances: entries, count: Some(out.count()) }
        }
    };
    kept_manifest.write(&kept_path)?;
    write_json(
        &out_dir.join("count.json"),
        &CountReport { count: out.count(), prompts: out.prompts.len(), candidates: out.candidates.len() },
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptConfig;

    fn blobs() -> BinaryMask {
        BinaryMask::from_fn(40, 20, |x, y| (2..8).contains(&y) && ((2..8).contains(&x) || (14..20).contains(&x) || (30..36).contains(&x)))
            .unwrap()
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig { prompt: PromptConfig { grid_size: 5, ..PromptConfig::default() }, ..PipelineConfig::default() }
    }

    #[test]
    fn flood_fill_component() {
        let m = blobs();
        let c = flood_fill(&m, 3, 3).unwrap();
        assert_eq!(c.count(), 36);
        assert!(c.get(7, 7) && !c.get(14, 2));
        assert!(flood_fill(&m, 0, 0).is_none());
    }

    #[test]
    fn three_blobs_counted() {
        let out = run_stage_transition(&blobs(), None, &cfg()).unwrap();
        assert_eq!(out.count(), 3);
        assert!(out.candidates.len() > 3);
    }

    #[test]
    fn duplicate_candidates_collapse() {
        let m = blobs();
        let one = flood_fill(&m, 3, 3).unwrap();
        let cands = vec![ScoredInstance::new(one.clone(), 0.8, None).unwrap(), ScoredInstance::new(one, 0.9, None).unwrap()];
        let out = run_stage_transition(&m, Some(cands), &cfg()).unwrap();
        assert_eq!(out.count(), 1);
        assert_eq!(out.kept, vec![1]);
    }

    #[test]
    fn empty_foreground() {
        let out = run_stage_transition(&BinaryMask::empty(10, 10).unwrap(), None, &cfg()).unwrap();
        assert_eq!(out.count(), 0);
        assert!(out.prompts.is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let other = ScoredInstance::new(BinaryMask::from_fn(3, 3, |_, _| true).unwrap(), 0.5, None).unwrap();
        assert!(run_stage_transition(&blobs(), Some(vec![other]), &cfg()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask_path = dir.path().join("fg.pgm");
        blobs().write(&mask_path).unwrap();
        let out = run_stage_transition_files(&mask_path, None, &cfg(), &dir.path().join("out")).unwrap();
        let kept = Manifest::read(&dir.path().join("out/kept.json")).unwrap();
        assert_eq!(kept.count, Some(3));
        let masks = kept.load_masks(&dir.path().join("out/kept.json")).unwrap();
        assert_eq!(masks.len(), out.count());

        // external candidates, resolved relative to their manifest
        let man_path = dir.path().join("cand.json");
        let man = Manifest {
            instances: kept.instances.iter().map(|e| ManifestEntry { mask: Path::new("out").join(&e.mask), ..e.clone() }).collect(),
            count: None,
        };
        man.write(&man_path).unwrap();
        let again = run_stage_transition_files(&mask_path, Some(&man_path), &cfg(), &dir.path().join("second")).unwrap();
        assert_eq!(again.count(), 3);
        let second = Manifest::read(&dir.path().join("second/kept.json")).unwrap();
        assert_eq!(second.load_masks(&dir.path().join("second/kept.json")).unwrap(), masks);
        assert!(run_stage_transition_files(&dir.path().join("missing.pgm"), None, &cfg(), dir.path()).is_err());
    }
}
