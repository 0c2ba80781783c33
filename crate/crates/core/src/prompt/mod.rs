//! Grid-based point prompts from a foreground mask, and IoU-based
//! deduplication of the instance masks those prompts produce.

mod manifest;
mod mask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub use manifest::{read_prompts, write_prompts, Manifest, ManifestEntry};
pub use mask::{write_gray, BinaryMask, Graymap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
    /// `(row, column)` of the generating cell.
    pub cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub grid_size: usize,
    pub saliency_threshold: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { grid_size: 64, saliency_threshold: 0.05, n_min: 1, n_max: 1024 }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::config("grid size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.saliency_threshold) {
            return Err(Error::config(format!(
                "saliency threshold {} outside [0, 1]",
                self.saliency_threshold
            )));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "need 1 <= n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Cell {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Per-cell foreground occupancy on a `g`-pixel grid. Edge cells may be smaller.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyGrid {
    pub rows: usize,
    pub cols: usize,
    pub grid_size: usize,
    width: usize,
    height: usize,
    rho: Vec<f64>,
}

impl SaliencyGrid {
    pub fn rho(&self, row: usize, col: usize) -> f64 {
        self.rho[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        let g = self.grid_size;
        Cell {
            row,
            col,
            x0: col * g,
            y0: row * g,
            x1: ((col + 1) * g).min(self.width),
            y1: ((row + 1) * g).min(self.height),
        }
    }
}

pub fn grid_saliency(mask: &BinaryMask, g: usize) -> Result<SaliencyGrid> {
    if g == 0 {
        return Err(Error::config("grid size must be at least 1"));
    }
    let (w, h) = (mask.width(), mask.height());
    let mut grid = SaliencyGrid {
        rows: h.div_ceil(g),
        cols: w.div_ceil(g),
        grid_size: g,
        width: w,
        height: h,
        rho: Vec::new(),
    };
    grid.rho = par::map_range(grid.rows * grid.cols, |i| {
        let c = grid.cell(i / grid.cols, i % grid.cols);
        let fg = (c.y0..c.y1)
            .map(|y| (c.x0..c.x1).filter(|&x| mask.get(x, y)).count())
            .sum::<usize>();
        fg as f64 / c.area() as f64
    });
    Ok(grid)
}

/// Floor of the mean foreground coordinate inside `cell`, or `None` if the
/// cell has no foreground.
pub fn cell_centroid(mask: &BinaryMask, cell: &Cell) -> Option<(usize, usize)> {
    let (mut n, mut sx, mut sy) = (0usize, 0usize, 0usize);
    for y in cell.y0..cell.y1.min(mask.height()) {
        for x in cell.x0..cell.x1.min(mask.width()) {
            if mask.get(x, y) {
                n += 1;
                sx += x;
                sy += y;
            }
        }
    }
    (n > 0).then(|| (sx / n, sy / n))
}

fn by_confidence(a: &PointPrompt, b: &PointPrompt) -> std::cmp::Ordering {
    b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell))
}

/// One prompt per cell whose occupancy exceeds the threshold, topped up to
/// `n_min` from the densest remaining non-empty cells and capped at `n_max`.
/// Sorted by descending confidence, ties by cell index.
pub fn generate_prompts(mask: &BinaryMask, cfg: &PromptConfig) -> Result<Vec<PointPrompt>> {
    cfg.validate()?;
    let grid = grid_saliency(mask, cfg.grid_size)?;
    let mut candidates: Vec<PointPrompt> = (0..grid.rows * grid.cols)
        .filter_map(|i| {
            let (row, col) = (i / grid.cols, i % grid.cols);
            let rho = grid.rho(row, col);
            if rho <= 0.0 {
                return None;
            }
            let (x, y) = cell_centroid(mask, &grid.cell(row, col))?;
            Some(PointPrompt { x, y, confidence: rho, cell: (row, col) })
        })
        .collect();
    candidates.sort_by(by_confidence);
    let above = candidates
        .iter()
        .take_while(|p| p.confidence > cfg.saliency_threshold)
        .count();
    candidates.truncate(above.max(cfg.n_min).min(cfg.n_max));
    Ok(candidates)
}

/// `|a ∩ b| / |a ∪ b|`, zero when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    let (inter, union) = a
        .bits()
        .iter()
        .zip(b.bits())
        .fold((0usize, 0usize), |(i, u), (&p, &q)| (i + (p && q) as usize, u + (p || q) as usize));
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance {
    pub mask: BinaryMask,
    pub score: f64,
    pub source_prompt: Option<PointPrompt>,
}

impl ScoredInstance {
    pub fn new(mask: BinaryMask, score: f64, source_prompt: Option<PointPrompt>) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::invalid("instance mask is empty"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("instance score {score} outside [0, 1]")));
        }
        Ok(Self { mask, score, source_prompt })
    }
}

/// Indices of the candidates kept by greedy score-ordered suppression, in
/// acceptance order. A candidate is dropped when its IoU with any kept mask
/// exceeds `tau`.
pub fn dedup_indices(candidates: &[ScoredInstance], tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("IoU threshold {tau} outside (0, 1]")));
    }
    if let Some(first) = candidates.first() {
        if let Some(bad) = candidates.iter().find(|c| !c.mask.same_dims(&first.mask)) {
            return Err(Error::ShapeMismatch {
                op: "dedup_instances",
                left: vec![first.mask.height(), first.mask.width()],
                right: vec![bad.mask.height(), bad.mask.width()],
            });
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let m = &candidates[i].mask;
        let clash = kept
            .iter()
            .any(|&k| mask_iou(&candidates[k].mask, m).expect("dims checked") > tau);
        if !clash {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn dedup_instances(candidates: &[ScoredInstance], tau: f64) -> Result<Vec<ScoredInstance>> {
    Ok(dedup_indices(candidates, tau)?
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)).unwrap()
    }

    fn inst(m: BinaryMask, s: f64) -> ScoredInstance {
        ScoredInstance::new(m, s, None).unwrap()
    }

    #[test]
    fn saliency_fixtures() {
        let full = rect(4, 4, 0, 0, 4, 4);
        assert_eq!(grid_saliency(&full, 2).unwrap().values(), &[1.0; 4]);
        let one = rect(4, 4, 0, 0, 1, 1);
        assert_eq!(grid_saliency(&one, 2).unwrap().values(), &[0.25, 0.0, 0.0, 0.0]);
        let none = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(grid_saliency(&none, 2).unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn edge_cells_use_their_own_area() {
        let m = rect(5, 3, 4, 0, 5, 3);
        let g = grid_saliency(&m, 2).unwrap();
        assert_eq!((g.rows, g.cols), (2, 3));
        assert_eq!(g.rho(0, 2), 1.0);
        assert_eq!(g.rho(1, 2), 1.0);
        assert_eq!(g.cell(1, 2).area(), 1);
    }

    #[test]
    fn centroid_fixtures() {
        let cell = Cell { row: 0, col: 0, x0: 0, y0: 0, x1: 4, y1: 4 };
        let mut m = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(cell_centroid(&m, &cell), None);
        m.set(1, 1, true);
        m.set(3, 3, true);
        assert_eq!(cell_centroid(&m, &cell), Some((2, 2)));
        let pair = BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 2).unwrap();
        assert_eq!(cell_centroid(&pair, &cell), Some((0, 0)));
    }

    #[test]
    fn full_mask_four_prompts() {
        let m = rect(128, 128, 0, 0, 128, 128);
        let p = generate_prompts(&m, &PromptConfig::default()).unwrap();
        let at: Vec<_> = p.iter().map(|p| (p.x, p.y, p.cell)).collect();
        // floor(mean(0..64)) = 31
        assert_eq!(at, vec![(31, 31, (0, 0)), (95, 31, (0, 1)), (31, 95, (1, 0)), (95, 95, (1, 1))]);
        assert!(p.iter().all(|p| p.confidence == 1.0));
    }

    #[test]
    fn fallback_and_cap() {
        assert!(generate_prompts(&BinaryMask::empty(8, 8).unwrap(), &PromptConfig::default()).unwrap().is_empty());
        // 1 pixel of 25 in a 5x5 cell: 0.04 < 0.05
        let sparse = rect(5, 5, 2, 2, 3, 3);
        let cfg = PromptConfig { grid_size: 5, ..PromptConfig::default() };
        let p = generate_prompts(&sparse, &cfg).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].x, p[0].y, p[0].confidence), (2, 2, 0.04));
        let dense = rect(8, 8, 0, 0, 8, 8);
        let capped = PromptConfig { grid_size: 2, n_max: 3, ..PromptConfig::default() };
        let p = generate_prompts(&dense, &capped).unwrap();
        assert_eq!(p.iter().map(|p| p.cell).collect::<Vec<_>>(), vec![(0, 0), (0, 1), (0, 2)]);
        assert!(generate_prompts(&dense, &PromptConfig { n_min: 0, ..PromptConfig::default() }).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let a = rect(4, 1, 0, 0, 2, 1);
        let b = rect(4, 1, 1, 0, 3, 1);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &rect(4, 1, 2, 0, 4, 1)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        let e = BinaryMask::empty(4, 1).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::empty(2, 2).unwrap()).is_err());
    }

    #[test]
    fn dedup_fixtures() {
        let a = rect(6, 6, 0, 0, 3, 3);
        let kept = dedup_instances(&[inst(a.clone(), 0.8), inst(a.clone(), 0.9)], 0.75).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let b = rect(6, 6, 3, 3, 6, 6);
        assert_eq!(dedup_instances(&[inst(a.clone(), 0.5), inst(b, 0.6)], 0.75).unwrap().len(), 2);
        assert!(ScoredInstance::new(BinaryMask::empty(2, 2).unwrap(), 0.5, None).is_err());
        assert!(dedup_indices(&[], 0.0).is_err());
        // equal scores keep first-seen order
        assert_eq!(dedup_indices(&[inst(a.clone(), 0.5), inst(a, 0.5)], 0.75).unwrap(), vec![0]);
    }

    #[test]
    fn raising_threshold_can_lower_greedy_count() {
        let row = |ranges: &[(usize, usize)]| BinaryMask::from_fn(20, 1, |x, _| ranges.iter().any(|r| (r.0..r.1).contains(&x))).unwrap();
        let cands = [
            inst(row(&[(2, 8), (10, 18)]), 0.9),
            inst(row(&[(0, 10)]), 0.8),
            inst(row(&[(0, 6)]), 0.7),
            inst(row(&[(4, 10)]), 0.6),
        ];
        assert_eq!(dedup_indices(&cands, 0.3).unwrap(), vec![0, 2, 3]);
        assert_eq!(dedup_indices(&cands, 0.55).unwrap(), vec![0, 1]);
    }

    fn random_mask(w: usize, h: usize, seed: u64) -> BinaryMask {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(usize, usize, usize)> = (0..rng.random_range(0..4))
            .map(|_| (rng.random_range(0..w), rng.random_range(0..h), rng.random_range(1..6)))
            .collect();
        BinaryMask::from_fn(w, h, |x, y| {
            blobs.iter().any(|&(cx, cy, r)| x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2) < r * r)
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn prompt_bounds(w in 1usize..40, h in 1usize..40, g in 1usize..12, seed in any::<u64>(),
                         n_min in 1usize..6, extra in 0usize..6, tau in 0.0f64..1.0) {
            let m = random_mask(w, h, seed);
            let cfg = PromptConfig { grid_size: g, saliency_threshold: tau, n_min, n_max: n_min + extra };
            let p = generate_prompts(&m, &cfg).unwrap();
            let grid = grid_saliency(&m, g).unwrap();
            let occupied = grid.values().iter().filter(|&&r| r > 0.0).count();
            if m.is_empty() {
                prop_assert!(p.is_empty());
            } else {
                prop_assert!(p.len() >= n_min.min(occupied) && p.len() <= cfg.n_max);
            }
            for q in &p {
                let c = grid.cell(q.cell.0, q.cell.1);
                prop_assert!(q.x < w && q.y < h);
                prop_assert!((c.x0..c.x1).contains(&q.x) && (c.y0..c.y1).contains(&q.y));
                prop_assert_eq!(q.confidence, grid.rho(q.cell.0, q.cell.1));
                prop_assert!(q.confidence > 0.0);
            }
            prop_assert!(p.windows(2).all(|w| by_confidence(&w[0], &w[1]).is_lt()));
            prop_assert_eq!(generate_prompts(&m, &cfg).unwrap(), p);
        }

        #[test]
        fn iou_properties(seed in any::<u64>(), other in any::<u64>()) {
            let (a, b) = (random_mask(10, 10, seed), random_mask(10, 10, other));
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b && !a.is_empty());
        }

        #[test]
        fn dedup_properties(seeds in proptest::collection::vec((any::<u64>(), 0.0f64..=1.0), 0..12),
                            tau in 0.05f64..=1.0) {
            let cands: Vec<_> = seeds.iter()
                .map(|&(s, score)| (random_mask(12, 12, s), score))
                .filter(|(m, _)| !m.is_empty())
                .map(|(m, s)| inst(m, s))
                .collect();
            let kept = dedup_instances(&cands, tau).unwrap();
            prop_assert!(kept.len() <= cands.len());
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(mask_iou(&a.mask, &b.mask).unwrap() <= tau);
                }
            }
            for c in &cands {
                let isolated = cands.iter().all(|o| std::ptr::eq(o, c) || mask_iou(&o.mask, &c.mask).unwrap() == 0.0);
                if isolated {
                    prop_assert!(kept.iter().any(|k| k.mask == c.mask && k.score == c.score));
                }
            }
        }
    }
}
