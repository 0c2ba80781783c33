//! Structure measure (object plus region similarity) and enhanced alignment.

use crate::prompt::BinaryMask;

pub(crate) const EPS: f64 = f64::EPSILON;

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

fn object_similarity(values: &[f64]) -> f64 {
    let (m, n) = mean(values.iter().copied());
    let sd = if n > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let (x, _) = mean(pred.iter().copied());
    let (y, _) = mean(gt.iter().copied());
    let d = n as f64 - 1.0 + EPS;
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `α·S_object + (1 − α)·S_region`, floored at 0. `sal` is row-major and
/// matches `gt`.
pub fn s_measure_slice(sal: &[f64], gt: &BinaryMask, alpha: f64) -> f64 {
    let (w, h) = (gt.width(), gt.height());
    let g = gt.bits();
    let (u, _) = mean(g.iter().map(|&b| b as u8 as f64));
    if u == 0.0 {
        return 1.0 - mean(sal.iter().copied()).0;
    }
    if u == 1.0 {
        return mean(sal.iter().copied()).0;
    }
    let fg: Vec<f64> = sal.iter().zip(g).filter(|(_, &b)| b).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = sal.iter().zip(g).filter(|(_, &b)| !b).map(|(&p, _)| 1.0 - p).collect();
    let object = u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg);

    let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
    for (i, _) in g.iter().enumerate().filter(|(_, &b)| b) {
        sx += i % w;
        sy += i / w;
        n += 1;
    }
    let cx = (sx as f64 / n as f64).round_ties_even() as usize + 1;
    let cy = (sy as f64 / n as f64).round_ties_even() as usize + 1;
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (w * h) as f64;
    let quadrants = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let weights = {
        let lt = (cx * cy) as f64 / area;
        let rt = (cy * (w - cx)) as f64 / area;
        let lb = ((h - cy) * cx) as f64 / area;
        [lt, rt, lb, 1.0 - lt - rt - lb]
    };
    let region: f64 = quadrants
        .iter()
        .zip(weights)
        .map(|(&(y0, y1, x0, x1), wq)| {
            let mut p = Vec::new();
            let mut q = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    p.push(sal[y * w + x]);
                    q.push(if g[y * w + x] { 1.0 } else { 0.0 });
                }
            }
            if p.is_empty() { 0.0 } else { wq * ssim(&p, &q) }
        })
        .sum();
    (alpha * object + (1.0 - alpha) * region).clamp(0.0, 1.0)
}

fn enhanced(f: f64, g: f64, mf: f64, mg: f64) -> f64 {
    let (af, ag) = (f - mf, g - mg);
    let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
    (align + 1.0).powi(2) / 4.0
}

/// Enhanced alignment of a binarized map against `gt`, computed from the four
/// pixel class counts.
pub fn e_measure_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> f64 {
    let total = tp + fp + fn_ + tn;
    let n = total as f64;
    let (gt_fg, pred_fg) = (tp + fn_, tp + fp);
    if gt_fg == 0 {
        return (total - pred_fg) as f64 / n;
    }
    if gt_fg == total {
        return pred_fg as f64 / n;
    }
    let (mf, mg) = (pred_fg as f64 / n, gt_fg as f64 / n);
    let sum = tp as f64 * enhanced(1.0, 1.0, mf, mg)
        + fp as f64 * enhanced(1.0, 0.0, mf, mg)
        + fn_ as f64 * enhanced(0.0, 1.0, mf, mg)
        + tn as f64 * enhanced(0.0, 0.0, mf, mg);
    sum / n
}
