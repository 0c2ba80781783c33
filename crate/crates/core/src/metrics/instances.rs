use serde::{Deserialize, Serialize};

use super::f_beta;
use crate::error::{Error, Result};
use crate::prompt::{mask_iou, BinaryMask, ScoredInstance};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap50: f64,
    /// Mean IoU over matched pairs only; 0 when nothing matched.
    pub matched_iou_mean: f64,
    pub matched: usize,
    pub predictions: usize,
    pub ground_truths: usize,
}

/// Score-ordered greedy matching at IoU ≥ 0.5, each prediction taking the
/// best-overlapping free ground truth, and all-point AP `Σ (R_n − R_{n−1})·P_n`.
pub fn ap50(preds: &[ScoredInstance], gts: &[BinaryMask]) -> Result<ApResult> {
    let Some(first) = gts.first() else {
        return Err(Error::invalid("AP needs at least one ground-truth instance"));
    };
    let dims = |m: &BinaryMask| vec![m.height(), m.width()];
    if let Some(bad) = gts.iter().chain(preds.iter().map(|p| &p.mask)).find(|m| !m.same_dims(first)) {
        return Err(Error::ShapeMismatch { op: "ap50", left: dims(first), right: dims(bad) });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));

    let mut taken = vec![false; gts.len()];
    let (mut hits, mut iou_sum, mut ap, mut prev_recall) = (0usize, 0.0, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate().filter(|(g, _)| !taken[*g]) {
            let iou = mask_iou(&preds[i].mask, gt)?;
            if iou >= MATCH_IOU && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            taken[g] = true;
            hits += 1;
            iou_sum += iou;
        }
        let precision = hits as f64 / (rank + 1) as f64;
        let recall = hits as f64 / gts.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ApResult {
        ap50: ap,
        matched_iou_mean: if hits == 0 { 0.0 } else { iou_sum / hits as f64 },
        matched: hits,
        predictions: preds.len(),
        ground_truths: gts.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub matched_iou_mean: f64,
    pub matched: usize,
    pub predictions: usize,
    pub ground_truths: usize,
}

/// Detection precision, recall and F1 from the AP matching.
pub fn instance_scores(preds: &[ScoredInstance], gts: &[BinaryMask]) -> Result<InstanceScores> {
    let ap = ap50(preds, gts)?;
    let precision = if ap.predictions == 0 { 0.0 } else { ap.matched as f64 / ap.predictions as f64 };
    let recall = ap.matched as f64 / ap.ground_truths as f64;
    Ok(InstanceScores {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        ap50: ap.ap50,
        matched_iou_mean: ap.matched_iou_mean,
        matched: ap.matched,
        predictions: ap.predictions,
        ground_truths: ap.ground_truths,
    })
}
