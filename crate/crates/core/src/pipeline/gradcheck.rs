use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsga::{dsga_forward, dsga_vjp, DsgaConfig, DsgaParams, Mode, SimilarityGraph};
use crate::error::{Error, Result};
use crate::lora::{lora_apply, lora_vjp, LoraLayer};
use crate::loss::{combined_loss, loss_grads, LossHyper, LossWeights};
use crate::numerics::{relative_error, Tensor, FD_STEP};
use crate::prompt::BinaryMask;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 3] = ["dsga_vjp", "lora_vjp", "loss_grads"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub batch: usize,
    pub max_nodes: usize,
    pub max_dim: usize,
    pub tolerance: f64,
    /// Adds 1 to the first analytic coordinate of the named operation.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 10, batch: 2, max_nodes: 16, max_dim: 8, tolerance: GRADCHECK_TOLERANCE, corrupt: None }
    }
}

impl GradcheckOptions {
    fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.batch == 0 {
            return Err(Error::config("gradient check needs at least one instance and a non-empty batch"));
        }
        if !(1..=16).contains(&self.max_nodes) || !(2..=8).contains(&self.max_dim) {
            return Err(Error::config(format!(
                "gradient check sizes limited to 1..=16 nodes and 2..=8 channels, got {} and {}",
                self.max_nodes, self.max_dim
            )));
        }
        if let Some(op) = &self.corrupt {
            if !OPS.contains(&op.as_str()) {
                return Err(Error::config(format!("unknown operation `{op}`")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates skipped because a perturbation changed a discrete selection.
    pub excluded: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
    pub passed: bool,
}

#[derive(Default)]
struct Tally {
    coordinates: usize,
    excluded: usize,
    worst: f64,
}

impl Tally {
    fn compare(&mut self, analytic: &[f64], numeric: &[Option<f64>]) {
        for (&a, n) in analytic.iter().zip(numeric) {
            self.coordinates += 1;
            match n {
                Some(f) => self.worst = self.worst.max(relative_error(a, *f)),
                None => self.excluded += 1,
            }
        }
    }

    fn report(self, op: &str, instances: usize, tol: f64) -> OpReport {
        OpReport {
            op: op.into(),
            instances,
            coordinates: self.coordinates,
            excluded: self.excluded,
            max_relative_error: self.worst,
            passed: self.worst <= tol && self.worst.is_finite(),
        }
    }
}

/// Central differences of a scalar function that also reports a discrete
/// signature; coordinates whose perturbation changes the signature are `None`.
fn guarded_fd<S: PartialEq>(x: &[f64], f: impl Fn(&[f64]) -> Result<(f64, S)>) -> Result<Vec<Option<f64>>> {
    let (_, base) = f(x)?;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let (fp, sp) = f(&probe)?;
            probe[i] = x[i] - FD_STEP;
            let (fm, sm) = f(&probe)?;
            probe[i] = x[i];
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index: i });
            }
            Ok((sp == base && sm == base).then(|| (fp - fm) / (2.0 * FD_STEP)))
        })
        .collect()
}

fn topology(g: &SimilarityGraph<f64>) -> Vec<usize> {
    let mut t = vec![g.requested_k];
    for e in &g.elements {
        for i in 0..e.nodes {
            t.extend_from_slice(e.neighbors(i));
        }
    }
    t
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn check_dsga(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, tally: &mut Tally, corrupt: bool) -> Result<()> {
    let d = rng.random_range(2..=opts.max_dim);
    let h = rng.random_range(1..=opts.max_nodes.min(4));
    let w = rng.random_range(1..=opts.max_nodes / h);
    let b = rng.random_range(1..=opts.batch);
    let cfg = DsgaConfig {
        reduction_ratio: 0.5,
        k_max: rng.random_range(1..=4),
        dropout_prob: if rng.random_bool(0.5) { 0.2 } else { 0.0 },
        mode: Mode::Train,
        seed: rng.random(),
        ..DsgaConfig::new(d)
    };
    let mut params: DsgaParams<f64> = DsgaParams::init(&cfg, rng);
    params.w_p = rng.random_range(-1.0..1.0);
    params.w_n = rng.random_range(-1.0..1.0);
    params.theta_k = rng.random_range(-2.0..2.0);
    params.rank_logits = uniform(rng, &[cfg.k_max], -1.0, 1.0);
    let x = uniform(rng, &[b, h, w, d], -1.0, 1.0);
    let up = uniform(rng, x.shape(), -1.0, 1.0);

    let g = dsga_vjp(&x, &params, &cfg, &up)?;
    let shape = x.shape().to_vec();
    let fx = guarded_fd(x.data(), |v| {
        let (out, graph) = dsga_forward(&Tensor::new(shape.clone(), v.to_vec())?, &params, &cfg)?;
        Ok((out.dot(&up)?, topology(&graph)))
    })?;
    let flat = params.to_flat();
    let theta_at = flat.len() - 3;
    let mut fp = guarded_fd(&flat, |v| {
        let p = DsgaParams::from_flat(&cfg, v)?;
        let (out, graph) = dsga_forward(&x, &p, &cfg)?;
        Ok((out.dot(&up)?, topology(&graph)))
    })?;
    // θ_k only enters through a floor
    fp[theta_at] = None;
    let mut ax = g.x.into_data();
    if corrupt {
        ax[0] += 1.0;
    }
    tally.compare(&ax, &fx);
    tally.compare(&g.params.to_flat(), &fp);
    Ok(())
}

fn check_lora(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, tally: &mut Tally, corrupt: bool) -> Result<()> {
    let (d, k) = (rng.random_range(1..=opts.max_dim), rng.random_range(1..=opts.max_dim));
    let r = rng.random_range(1..=d.min(k));
    let m = rng.random_range(1..=opts.max_nodes);
    let layer = LoraLayer::new(
        uniform(rng, &[d, k], -1.0, 1.0),
        uniform(rng, &[r, k], -1.0, 1.0),
        uniform(rng, &[d, r], -1.0, 1.0),
        rng.random_range(0.5..16.0),
    )?;
    let x = uniform(rng, &[m, k], -1.0, 1.0);
    let up = uniform(rng, &[m, d], -1.0, 1.0);
    let g = lora_vjp(&layer, &x, &up)?;
    let fx = guarded_fd(x.data(), |v| Ok((lora_apply(&layer, &Tensor::new(vec![m, k], v.to_vec())?)?.dot(&up)?, ())))?;
    let fa = guarded_fd(layer.a.data(), |v| {
        let l = LoraLayer { a: Tensor::new(vec![r, k], v.to_vec())?, ..layer.clone() };
        Ok((lora_apply(&l, &x)?.dot(&up)?, ()))
    })?;
    let fb = guarded_fd(layer.b.data(), |v| {
        let l = LoraLayer { b: Tensor::new(vec![d, r], v.to_vec())?, ..layer.clone() };
        Ok((lora_apply(&l, &x)?.dot(&up)?, ()))
    })?;
    let mut ax = g.x.into_data();
    if corrupt {
        ax[0] += 1.0;
    }
    tally.compare(&ax, &fx);
    tally.compare(g.a.data(), &fa);
    tally.compare(g.b.data(), &fb);
    Ok(())
}

fn check_loss(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, tally: &mut Tally, corrupt: bool) -> Result<()> {
    let h = rng.random_range(1..=opts.max_nodes.min(4));
    let w = rng.random_range(1..=opts.max_nodes / h);
    let mut gt = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(0.5))?;
    if w * h > 1 && (gt.is_empty() || gt.count() == w * h) {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        gt.set(x, y, !gt.get(x, y));
    }
    let pred = uniform(rng, &[h, w], 0.05, 0.95);
    let weights = LossWeights::new([rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.1..2.0)])?;
    let hyper = LossHyper { focal_gamma: rng.random_range(0.0..3.0), focal_alpha: rng.random_range(0.1..0.9), dice_smooth: rng.random_range(0.5..2.0) };
    let mut a = loss_grads(&pred, &gt, &weights, &hyper)?.into_data();
    let f = guarded_fd(pred.data(), |v| {
        Ok((combined_loss(&Tensor::new(vec![h, w], v.to_vec())?, &gt, &weights, &hyper)?.total, ()))
    })?;
    if corrupt {
        a[0] += 1.0;
    }
    tally.compare(&a, &f);
    Ok(())
}

type Check = fn(&mut ChaCha8Rng, &GradcheckOptions, &mut Tally, bool) -> Result<()>;

/// Analytic versus central-difference gradients for every differentiable
/// operation, on small random double-precision instances.
pub fn gradcheck_all(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    opts.validate()?;
    let checks: [Check; 3] = [check_dsga, check_lora, check_loss];
    let mut ops = Vec::new();
    for (op_index, (name, check)) in OPS.iter().zip(checks).enumerate() {
        let mut tally = Tally::default();
        for i in 0..opts.instances {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((op_index as u64) << 32) | i as u64);
            let corrupt = i == 0 && opts.corrupt.as_deref() == Some(*name);
            check(&mut rng, opts, &mut tally, corrupt)?;
        }
        ops.push(tally.report(name, opts.instances, opts.tolerance));
    }
    let passed = ops.iter().all(|o| o.passed);
    Ok(GradcheckReport { tolerance: opts.tolerance, ops, passed })
}
