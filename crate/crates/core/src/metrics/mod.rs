//! Saliency and instance evaluation: precision/recall, F-measure, structure
//! measure, enhanced alignment, MAE, and AP at IoU 0.5.

mod instances;
mod structure;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use crate::prompt::BinaryMask;

pub use instances::{ap50, instance_scores, ApResult, InstanceScores, MATCH_IOU};
pub use structure::{e_measure_counts, s_measure_slice};

pub const BETA_SQ: f64 = 0.3;
pub const LEVELS: usize = 256;
pub const S_ALPHA: f64 = 0.5;

/// Pixel confusion counts of a binary prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_dims(pred, gt, "precision_recall")?;
        Ok(Self::from_bits(pred.bits(), gt.bits()))
    }

    fn from_bits(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Empty prediction: precision 1 if the ground truth is empty too, else 0.
    /// Empty ground truth: recall 1.
    pub fn precision_recall(&self) -> (f64, f64) {
        let pred = self.tp + self.fp;
        let gt = self.tp + self.fn_;
        let p = if pred == 0 { (gt == 0) as u8 as f64 } else { self.tp as f64 / pred as f64 };
        let r = if gt == 0 { 1.0 } else { self.tp as f64 / gt as f64 };
        (p, r)
    }

    pub fn e_measure(&self) -> f64 {
        e_measure_counts(self.tp, self.fp, self.fn_, self.tn)
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask, op: &'static str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, left: vec![a.height(), a.width()], right: vec![b.height(), b.width()] })
    }
}

pub fn precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    Ok(Counts::of(pred, gt)?.precision_recall())
}

/// `(1 + β²)PR / (β²P + R)`, zero when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

pub fn e_measure(binarized: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(binarized, gt, "e_measure")?;
    Ok(Counts::of(binarized, gt)?.e_measure())
}

/// Checks `sal` is an `[H, W]` map in `[0, 1]` matching `gt`.
fn check_map(sal: &Tensor<f64>, gt: &BinaryMask, op: &'static str) -> Result<()> {
    if sal.shape() != [gt.height(), gt.width()] {
        return Err(Error::ShapeMismatch { op, left: sal.shape().to_vec(), right: vec![gt.height(), gt.width()] });
    }
    if let Some(v) = sal.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{op}: saliency value {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn s_measure(sal: &Tensor<f64>, gt: &BinaryMask, alpha: f64) -> Result<f64> {
    check_map(sal, gt, "s_measure")?;
    Ok(s_measure_slice(sal.data(), gt, alpha))
}

pub fn mae(sal: &Tensor<f64>, gt: &BinaryMask) -> Result<f64> {
    check_map(sal, gt, "mae")?;
    let sum: f64 = sal.data().iter().zip(gt.bits()).map(|(&s, &g)| (s - if g { 1.0 } else { 0.0 }).abs()).sum();
    Ok(sum / sal.len() as f64)
}

/// `min(2·mean, 1)`.
pub fn adaptive_threshold(sal: &Tensor<f64>) -> f64 {
    (2.0 * sal.sum() / sal.len().max(1) as f64).min(1.0)
}

/// `sal > t` as a mask.
pub fn binarize(sal: &Tensor<f64>, gt: &BinaryMask, t: f64) -> Result<BinaryMask> {
    check_map(sal, gt, "binarize")?;
    BinaryMask::new(gt.width(), gt.height(), sal.data().iter().map(|&v| v > t).collect())
}

pub fn level(i: usize) -> f64 {
    i as f64 / (LEVELS - 1) as f64
}

/// Number of sweep levels strictly below `v`, i.e. how many thresholds the
/// pixel survives.
fn levels_below(v: f64) -> usize {
    let mut k = ((v * (LEVELS - 1) as f64).floor().max(0.0) as usize).min(LEVELS - 1);
    while k < LEVELS && v > level(k) {
        k += 1;
    }
    while k > 0 && !(v > level(k - 1)) {
        k -= 1;
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub e: f64,
}

/// Binarizes at `t = i / 255` for `i` in `0..256` and scores each level.
pub fn threshold_sweep(sal: &Tensor<f64>, gt: &BinaryMask) -> Result<Vec<CurvePoint>> {
    check_map(sal, gt, "threshold_sweep")?;
    // hist[c] = pixels exceeding exactly the first c levels
    let mut fg_hist = [0usize; LEVELS + 1];
    let mut bg_hist = [0usize; LEVELS + 1];
    for (&v, &g) in sal.data().iter().zip(gt.bits()) {
        let c = levels_below(v);
        if g { fg_hist[c] += 1 } else { bg_hist[c] += 1 }
    }
    let n_fg = gt.count();
    let n_bg = gt.bits().len() - n_fg;
    // a pixel passes level i when it exceeds more than i levels
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = vec![None; LEVELS];
    for i in (0..LEVELS).rev() {
        tp += fg_hist[i + 1];
        fp += bg_hist[i + 1];
        let counts = Counts { tp, fp, fn_: n_fg - tp, tn: n_bg - fp };
        let (precision, recall) = counts.precision_recall();
        curve[i] = Some(CurvePoint {
            threshold: level(i),
            counts,
            precision,
            recall,
            f: f_beta(precision, recall, BETA_SQ),
            e: counts.e_measure(),
        });
    }
    Ok(curve.into_iter().map(|p| p.expect("filled")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_measure: f64,
    pub f_mean: f64,
    pub f_max: f64,
    pub f_adaptive: f64,
    pub e_mean: f64,
    pub e_max: f64,
    pub e_adaptive: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub threshold_curve: Vec<CurvePoint>,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 8] =
        ["s_measure", "f_mean", "f_max", "f_adaptive", "e_mean", "e_max", "e_adaptive", "mae"];

    pub fn scalars(&self) -> [f64; 8] {
        [self.s_measure, self.f_mean, self.f_max, self.f_adaptive, self.e_mean, self.e_max, self.e_adaptive, self.mae]
    }

    /// Column means over a dataset. The curve is dropped.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.scalars()) {
                *a += v;
            }
        }
        let n = reports.len() as f64;
        let [s_measure, f_mean, f_max, f_adaptive, e_mean, e_max, e_adaptive, mae] = acc.map(|a| a / n);
        Some(MetricReport { s_measure, f_mean, f_max, f_adaptive, e_mean, e_max, e_adaptive, mae, threshold_curve: Vec::new() })
    }
}

pub fn evaluate_saliency(sal: &Tensor<f64>, gt: &BinaryMask) -> Result<MetricReport> {
    let curve = threshold_sweep(sal, gt)?;
    let n = curve.len() as f64;
    let adaptive = Counts::of(&binarize(sal, gt, adaptive_threshold(sal))?, gt)?;
    let (ap, ar) = adaptive.precision_recall();
    Ok(MetricReport {
        s_measure: s_measure(sal, gt, S_ALPHA)?,
        f_mean: curve.iter().map(|c| c.f).sum::<f64>() / n,
        f_max: curve.iter().map(|c| c.f).fold(0.0, f64::max),
        f_adaptive: f_beta(ap, ar, BETA_SQ),
        e_mean: curve.iter().map(|c| c.e).sum::<f64>() / n,
        e_max: curve.iter().map(|c| c.e).fold(0.0, f64::max),
        e_adaptive: adaptive.e_measure(),
        mae: mae(sal, gt)?,
        threshold_curve: curve,
    })
}

/// Evaluates independent `(saliency, ground truth)` pairs, in order.
pub fn evaluate_batch(pairs: &[(Tensor<f64>, BinaryMask)]) -> Result<Vec<MetricReport>> {
    par::map_slice(pairs, |(s, g)| evaluate_saliency(s, g)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_of(m: &BinaryMask) -> Tensor<f64> {
        Tensor::new(vec![m.height(), m.width()], m.to_f64()).unwrap()
    }

    #[test]
    fn pr_fixtures() {
        let gt = BinaryMask::from_fn(4, 1, |x, _| x < 2).unwrap();
        assert_eq!(precision_recall(&gt, &gt).unwrap(), (1.0, 1.0));
        let sub = BinaryMask::from_fn(4, 1, |x, _| x == 0).unwrap();
        assert_eq!(precision_recall(&sub, &gt).unwrap(), (1.0, 0.5));
        let shifted = BinaryMask::from_fn(4, 1, |x, _| (1..3).contains(&x)).unwrap();
        assert_eq!(precision_recall(&shifted, &gt).unwrap(), (0.5, 0.5));
        let empty = BinaryMask::empty(4, 1).unwrap();
        assert_eq!(precision_recall(&empty, &empty).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&empty, &gt).unwrap(), (0.0, 0.0));
        assert_eq!(precision_recall(&gt, &empty).unwrap(), (0.0, 1.0));
        assert!(precision_recall(&gt, &BinaryMask::empty(2, 2).unwrap()).is_err());
    }

    #[test]
    fn f_fixtures() {
        assert_eq!(f_beta(1.0, 1.0, BETA_SQ), 1.0);
        assert_eq!(f_beta(1.0, 0.5, BETA_SQ), 0.8125);
        assert_eq!(f_beta(0.0, 0.0, BETA_SQ), 0.0);
        for x in [0.1, 0.37, 0.9] {
            assert!((f_beta(x, x, BETA_SQ) - x).abs() < 1e-15);
            assert!((f_beta(x, x, 1.0) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_levels() {
        for i in 0..LEVELS {
            assert_eq!(levels_below(level(i)), i);
        }
        assert_eq!(levels_below(0.0), 0);
        assert_eq!(levels_below(1.0), 255);
        assert_eq!(levels_below(f64::from_bits(1)), 1);
    }

    fn brute(sal: &Tensor<f64>, gt: &BinaryMask) -> Vec<Counts> {
        (0..LEVELS)
            .map(|i| {
                let t = i as f64 / 255.0;
                let pred: Vec<bool> = sal.data().iter().map(|&v| v > t).collect();
                Counts::from_bits(&pred, gt.bits())
            })
            .collect()
    }

    #[test]
    fn sweep_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let gt = BinaryMask::from_fn(8, 8, |_, _| rng.random_bool(0.3)).unwrap();
            let sal = Tensor::from_fn(&[8, 8], |_| {
                if rng.random_bool(0.3) { rng.random_range(0..256) as f64 / 255.0 } else { rng.random_range(0.0..=1.0) }
            });
            let curve = threshold_sweep(&sal, &gt).unwrap();
            let counts: Vec<Counts> = curve.iter().map(|c| c.counts).collect();
            assert_eq!(counts, brute(&sal, &gt));
        }
    }

    #[test]
    fn sweep_degenerate_paths() {
        let gt = BinaryMask::from_fn(4, 4, |x, _| x < 2).unwrap();
        let curve = threshold_sweep(&map_of(&gt), &gt).unwrap();
        assert!(curve[..255].iter().all(|c| c.f == 1.0));
        assert_eq!(curve[255].f, 0.0);
        let empty = BinaryMask::empty(4, 4).unwrap();
        let half = Tensor::full(&[4, 4], 0.5);
        let curve = threshold_sweep(&half, &empty).unwrap();
        assert!(curve.iter().all(|c| c.recall == 1.0));
        assert_eq!(curve[0].precision, 0.0);
        assert_eq!(curve[200].precision, 1.0);
    }

    #[test]
    fn adaptive_fixtures() {
        assert_eq!(adaptive_threshold(&Tensor::full(&[2, 2], 0.25)), 0.5);
        assert_eq!(adaptive_threshold(&Tensor::full(&[2, 2], 0.8)), 1.0);
        let z = Tensor::full(&[2, 2], 0.0);
        assert_eq!(adaptive_threshold(&z), 0.0);
        assert!(binarize(&z, &BinaryMask::empty(2, 2).unwrap(), 0.0).unwrap().is_empty());
    }

    #[test]
    fn mae_fixtures() {
        let gt = BinaryMask::from_fn(3, 3, |x, y| x == y).unwrap();
        assert_eq!(mae(&map_of(&gt), &gt).unwrap(), 0.0);
        assert_eq!(mae(&map_of(&gt.complement()), &gt).unwrap(), 1.0);
        assert_eq!(mae(&Tensor::full(&[3, 3], 0.5), &gt).unwrap(), 0.5);
        assert!(mae(&Tensor::full(&[3, 3], 1.5), &gt).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let gt = BinaryMask::from_fn(9, 7, |x, y| (2..6).contains(&x) && (1..4).contains(&y)).unwrap();
        let r = evaluate_saliency(&map_of(&gt), &gt).unwrap();
        assert!((r.s_measure - 1.0).abs() < 1e-6);
        assert_eq!((r.f_max, r.f_adaptive, r.mae), (1.0, 1.0, 0.0));
        assert!((r.e_max - 1.0).abs() < 1e-6 && (r.e_adaptive - 1.0).abs() < 1e-6);
        assert!((e_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn report_ranges(bits in proptest::collection::vec(any::<bool>(), 30),
                         vals in proptest::collection::vec(0.0f64..=1.0, 30)) {
            let gt = BinaryMask::new(6, 5, bits).unwrap();
            let sal = Tensor::new(vec![5, 6], vals).unwrap();
            let r = evaluate_saliency(&sal, &gt).unwrap();
            for v in r.scalars() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.f_max >= r.f_mean && r.e_max >= r.e_mean);
            let t = adaptive_threshold(&sal);
            let at = r.threshold_curve.iter().filter(|c| c.threshold <= t).last().unwrap();
            prop_assert!(r.f_max >= at.f);
        }
    }
}
