use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{
    adaptive_k, build_element, propagate_element, propagate_element_vjp, rank_weights,
    similarity_block, softmax_vjp, ElementGraph, SimilarityGraph,
};
use super::pool::{pool_block, pool_block_vjp, residual_gate};
use super::{DsgaConfig, DsgaParams, Mode};
use crate::error::{Error, Result};
use crate::numerics::{gelu_grad_scalar, gelu_scalar, gemm, gemm_nt, gemm_tn, sigmoid, Real, Tensor};
use crate::par;

struct Dims {
    h: usize,
    w: usize,
    n: usize,
    d: usize,
    hid: usize,
}

/// Intermediate values of one batch element, kept for the backward pass.
struct Trace<T> {
    pre_act: Vec<T>,
    z: Vec<T>,
    graph: ElementGraph<T>,
    propagated: Vec<T>,
    fused: Vec<T>,
    pool_max: Vec<T>,
    pool_avg: Vec<T>,
    argmax: Vec<usize>,
    pooled: Vec<T>,
    dropout: Option<Vec<T>>,
    dropped: Vec<T>,
    out: Vec<T>,
}

fn check_stage<T: Real>(v: &[T], stage: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

fn dims<T: Real>(x: &Tensor<T>, params: &DsgaParams<T>, cfg: &DsgaConfig) -> Result<(usize, Dims)> {
    cfg.validate()?;
    params.validate(cfg)?;
    let [b, h, w, d] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "dsga_forward",
            detail: format!("expected [B, H, W, D], got {:?}", x.shape()),
        });
    };
    if d != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "dsga_forward",
            left: x.shape().to_vec(),
            right: vec![b, h, w, cfg.embed_dim],
        });
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "dsga_forward",
            detail: "spatial extents must be positive".into(),
        });
    }
    Ok((
        b,
        Dims {
            h,
            w,
            n: h * w,
            d,
            hid: cfg.hidden_dim(),
        },
    ))
}

/// Inverted-dropout multipliers. Element `e` of batch item `b` draws the
/// `(b·len + e)`-th word pair of the ChaCha stream `(seed, layer_index)`.
fn dropout_mask<T: Real>(cfg: &DsgaConfig, batch: usize, len: usize) -> Option<Vec<T>> {
    if cfg.mode == Mode::Eval || cfg.dropout_prob == 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.layer_index);
    rng.set_word_pos(2 * (batch * len) as u128);
    let keep = T::of(1.0 / (1.0 - cfg.dropout_prob));
    Some(
        (0..len)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                if u < cfg.dropout_prob {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn forward_element<T: Real>(
    x: &[T],
    bi: usize,
    params: &DsgaParams<T>,
    cfg: &DsgaConfig,
    dm: &Dims,
    k: usize,
    weights: &[T],
) -> Result<Trace<T>> {
    let Dims { h, w, n, d, hid } = *dm;

    let mut pre_act = vec![T::zero(); n * hid];
    gemm(x, params.down_w.data(), n, d, hid, &mut pre_act);
    for row in pre_act.chunks_mut(hid) {
        for (v, &bias) in row.iter_mut().zip(params.down_b.data()) {
            *v = *v + bias;
        }
    }
    check_stage(&pre_act, "down_projection")?;
    let z: Vec<T> = pre_act.iter().map(|&v| gelu_scalar(v)).collect();
    check_stage(&z, "gelu")?;

    let sim = similarity_block(&z, n, hid);
    check_stage(&sim, "similarity")?;
    let graph = build_element(&sim, n, k, weights);
    let propagated = propagate_element(&graph, &z, hid);
    check_stage(&propagated, "propagation")?;

    let mut fused = vec![T::zero(); n * hid];
    gemm(&propagated, params.fusion_w.data(), n, hid, hid, &mut fused);
    check_stage(&fused, "fusion")?;

    let (pool_max, pool_avg, argmax) = pool_block(&fused, h, w, hid);
    let sp = sigmoid(params.w_p);
    let pooled: Vec<T> = pool_max
        .iter()
        .zip(&pool_avg)
        .map(|(&m, &a)| sp * m + (T::one() - sp) * a)
        .collect();
    let gate = residual_gate(params.w_n);
    let mixed: Vec<T> = fused
        .iter()
        .zip(&pooled)
        .map(|(&f, &p)| (T::one() - gate) * f + gate * p)
        .collect();
    check_stage(&mixed, "pooling")?;

    let dropout = dropout_mask::<T>(cfg, bi, n * hid);
    let dropped = match &dropout {
        Some(mask) => mixed.iter().zip(mask).map(|(&v, &m)| v * m).collect(),
        None => mixed,
    };

    let mut out = vec![T::zero(); n * d];
    gemm(&dropped, params.up_w.data(), n, hid, d, &mut out);
    for (row, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
        for ((v, &bias), &xv) in row.iter_mut().zip(params.up_b.data()).zip(xrow) {
            *v = (*v + bias) + xv;
        }
    }
    check_stage(&out, "up_projection")?;

    Ok(Trace {
        pre_act,
        z,
        graph,
        propagated,
        fused,
        pool_max,
        pool_avg,
        argmax,
        pooled,
        dropout,
        dropped,
        out,
    })
}

fn run<T: Real>(
    x: &Tensor<T>,
    params: &DsgaParams<T>,
    cfg: &DsgaConfig,
) -> Result<(usize, Dims, usize, Vec<T>, Vec<Trace<T>>)> {
    let (b, dm) = dims(x, params, cfg)?;
    let k = adaptive_k(params.theta_k, cfg.k_max);
    let weights = rank_weights(params.rank_logits.data());
    let block = dm.n * dm.d;
    let traces = par::map_range(b, |bi| {
        forward_element(&x.data()[bi * block..(bi + 1) * block], bi, params, cfg, &dm, k, &weights)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((b, dm, k, weights, traces))
}

/// Adapter forward pass on `x: [B, H, W, D]`. Returns the adapted field and
/// the similarity graph built for each batch element.
pub fn dsga_forward<T: Real>(
    x: &Tensor<T>,
    params: &DsgaParams<T>,
    cfg: &DsgaConfig,
) -> Result<(Tensor<T>, SimilarityGraph<T>)> {
    let (_, _, k, _, traces) = run(x, params, cfg)?;
    let mut out = Vec::with_capacity(x.len());
    let mut elements = Vec::with_capacity(traces.len());
    for t in traces {
        out.extend(t.out);
        elements.push(t.graph);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        SimilarityGraph {
            requested_k: k,
            elements,
        },
    ))
}

/// Cotangents of [`dsga_forward`]'s output with respect to its input and
/// every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct DsgaVjp<T> {
    pub x: Tensor<T>,
    pub params: DsgaParams<T>,
}

/// Reverse pass. Top-k membership and the chosen `k` are constants of the
/// forward pass, so `θ_k` always receives a zero cotangent.
pub fn dsga_vjp<T: Real>(
    x: &Tensor<T>,
    params: &DsgaParams<T>,
    cfg: &DsgaConfig,
    upstream: &Tensor<T>,
) -> Result<DsgaVjp<T>> {
    x.expect_same_shape(upstream, "dsga_vjp")?;
    let (b, dm, _, weights, traces) = run(x, params, cfg)?;
    let Dims { h, w, n, d, hid } = dm;
    let block = n * d;
    let gate = residual_gate(params.w_n);
    let sn = sigmoid(params.w_n);
    let sp = sigmoid(params.w_p);

    let per = par::map_range(b, |bi| {
        let tr = &traces[bi];
        let xb = &x.data()[bi * block..(bi + 1) * block];
        let gout = &upstream.data()[bi * block..(bi + 1) * block];
        let mut g = DsgaParams::zeros(cfg);
        g.rank_logits = Tensor::zeros(&[cfg.k_max]);
        g.theta_k = T::zero();

        // out = dropped·up + b_up + x
        let mut dx = gout.to_vec();
        gemm_tn(&tr.dropped, gout, n, hid, d, g.up_w.data_mut());
        for row in gout.chunks(d) {
            for (acc, &v) in g.up_b.data_mut().iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        let mut dmixed = vec![T::zero(); n * hid];
        gemm_nt(gout, params.up_w.data(), n, d, hid, &mut dmixed);
        if let Some(mask) = &tr.dropout {
            dmixed.iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
        }

        // gated residual and hybrid pooling
        let one = T::one();
        let mut dfused: Vec<T> = dmixed.iter().map(|&v| (one - gate) * v).collect();
        let dpooled: Vec<T> = dmixed.iter().map(|&v| gate * v).collect();
        let dgate = dmixed
            .iter()
            .zip(tr.pooled.iter().zip(&tr.fused))
            .fold(T::zero(), |a, (&gv, (&p, &f))| a + gv * (p - f));
        g.w_n = dgate * T::of(0.5) * sn * (one - sn);
        let dmax: Vec<T> = dpooled.iter().map(|&v| sp * v).collect();
        let davg: Vec<T> = dpooled.iter().map(|&v| (one - sp) * v).collect();
        let dblend = dpooled
            .iter()
            .zip(tr.pool_max.iter().zip(&tr.pool_avg))
            .fold(T::zero(), |a, (&gv, (&m, &av))| a + gv * (m - av));
        g.w_p = dblend * sp * (one - sp);
        let dpool_in = pool_block_vjp(&dmax, &davg, &tr.argmax, h, w, hid);
        dfused.iter_mut().zip(&dpool_in).for_each(|(a, &v)| *a = *a + v);

        // fused = propagated·W
        gemm_tn(&tr.propagated, &dfused, n, hid, hid, g.fusion_w.data_mut());
        let mut dprop = vec![T::zero(); n * hid];
        gemm_nt(&dfused, params.fusion_w.data(), n, hid, hid, &mut dprop);

        // propagated = A·z
        let (dz, dw) = propagate_element_vjp(&tr.graph, &tr.z, &tr.propagated, &dprop, &weights, hid);
        g.rank_logits = Tensor::from_parts(vec![cfg.k_max], softmax_vjp(&weights, &dw));

        // z = gelu(x·down + b_down)
        let dpre: Vec<T> = dz
            .iter()
            .zip(&tr.pre_act)
            .map(|(&gz, &u)| gz * gelu_grad_scalar(u))
            .collect();
        gemm_tn(xb, &dpre, n, d, hid, g.down_w.data_mut());
        for row in dpre.chunks(hid) {
            for (acc, &v) in g.down_b.data_mut().iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        let mut dx_down = vec![T::zero(); n * d];
        gemm_nt(&dpre, params.down_w.data(), n, hid, d, &mut dx_down);
        dx.iter_mut().zip(&dx_down).for_each(|(a, &v)| *a = *a + v);
        (dx, g)
    });

    let mut dx = Vec::with_capacity(x.len());
    let mut total = DsgaParams::zeros(cfg);
    total.rank_logits = Tensor::zeros(&[cfg.k_max]);
    total.theta_k = T::zero();
    let mut flat = vec![T::zero(); total.count()];
    for (dxb, g) in per {
        dx.extend(dxb);
        for (acc, v) in flat.iter_mut().zip(g.to_flat()) {
            *acc = *acc + v;
        }
    }
    Ok(DsgaVjp {
        x: Tensor::from_parts(x.shape().to_vec(), dx),
        params: DsgaParams::from_flat(cfg, &flat)?,
    })
}
