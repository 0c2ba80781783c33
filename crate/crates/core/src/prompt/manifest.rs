//! JSON manifests of instance masks and JSON-lines prompt files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, PointPrompt, ScoredInstance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Mask file, relative to the manifest's directory unless absolute.
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Index into the prompt list that produced this candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub instances: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(manifest: &Path, entry: &Path) -> PathBuf {
        match manifest.parent() {
            Some(dir) if entry.is_relative() => dir.join(entry),
            _ => entry.to_path_buf(),
        }
    }

    /// Loads every mask; dimensions must agree.
    pub fn load_masks(&self, manifest: &Path) -> Result<Vec<BinaryMask>> {
        let masks = self
            .instances
            .iter()
            .map(|e| BinaryMask::read(&Self::resolve(manifest, &e.mask)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = masks.first() {
            if let Some(bad) = masks.iter().find(|m| !m.same_dims(first)) {
                return Err(Error::ShapeMismatch {
                    op: "manifest",
                    left: vec![first.height(), first.width()],
                    right: vec![bad.height(), bad.width()],
                });
            }
        }
        Ok(masks)
    }

    /// Loads scored instances, attaching prompts by index when given.
    pub fn load_instances(&self, manifest: &Path, prompts: Option<&[PointPrompt]>) -> Result<Vec<ScoredInstance>> {
        let masks = self.load_masks(manifest)?;
        self.instances
            .iter()
            .zip(masks)
            .map(|(e, m)| {
                let score = e
                    .score
                    .ok_or_else(|| Error::invalid(format!("{}: candidate has no score", e.mask.display())))?;
                let source = match (e.prompt, prompts) {
                    (Some(i), Some(ps)) => Some(*ps.get(i).ok_or_else(|| {
                        Error::invalid(format!("{}: prompt index {i} out of range", e.mask.display()))
                    })?),
                    _ => None,
                };
                ScoredInstance::new(m, score, source)
                    .map_err(|err| Error::invalid(format!("{}: {err}", e.mask.display())))
            })
            .collect()
    }

    /// Entry paths re-expressed for a manifest written at `target`.
    pub fn rebased(&self, from: &Path, target: &Path) -> Self {
        let same_dir = match (from.parent(), target.parent()) {
            (Some(a), Some(b)) => a == b || fs::canonicalize(a).ok() == fs::canonicalize(b).ok() && fs::canonicalize(a).is_ok(),
            _ => false,
        };
        let instances = self
            .instances
            .iter()
            .map(|e| {
                let mask = if same_dir || e.mask.is_absolute() {
                    e.mask.clone()
                } else {
                    let p = Self::resolve(from, &e.mask);
                    fs::canonicalize(&p).unwrap_or(p)
                };
                ManifestEntry { mask, ..e.clone() }
            })
            .collect();
        Self { instances, count: self.count }
    }
}

pub fn write_prompts(path: &Path, prompts: &[PointPrompt]) -> Result<()> {
    let mut out = Vec::new();
    for p in prompts {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_prompts(path: &Path) -> Result<Vec<PointPrompt>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_line_format() {
        let p = PointPrompt { x: 3, y: 4, confidence: 0.5, cell: (1, 2) };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"x":3,"y":4,"confidence":0.5,"cell":[1,2]}"#);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_prompts(&path, &[p, p]).unwrap();
        assert_eq!(read_prompts(&path).unwrap(), vec![p, p]);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(3, 3, |x, _| x == 1).unwrap();
        m.write(&dir.path().join("a.pgm")).unwrap();
        m.write(&dir.path().join("b.pbm")).unwrap();
        let man = Manifest {
            instances: vec![
                ManifestEntry { mask: "a.pgm".into(), score: Some(0.9), prompt: Some(0) },
                ManifestEntry { mask: "b.pbm".into(), score: Some(0.4), prompt: None },
            ],
            count: None,
        };
        let path = dir.path().join("cand.json");
        man.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, man);
        let p = PointPrompt { x: 1, y: 1, confidence: 1.0, cell: (0, 0) };
        let inst = back.load_instances(&path, Some(&[p])).unwrap();
        assert_eq!(inst[0].source_prompt, Some(p));
        assert_eq!(inst[1].mask, m);
        assert!(back.load_instances(&path, Some(&[])).is_err());
        assert!(serde_json::from_str::<Manifest>(r#"{"instances":[],"extra":1}"#).is_err());
    }
}
