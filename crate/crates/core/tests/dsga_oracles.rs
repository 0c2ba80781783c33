//! The adapter checked against a dense straight-line re-implementation and
//! against central finite differences.

use graphadapt::dsga::{dsga_forward, dsga_vjp, propagate, similarity_matrix, DsgaConfig, DsgaParams};
use graphadapt::numerics::{finite_diff_grad, max_relative_error, Tensor, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Every step written out with dense matrices and nested loops.
fn reference_forward(x: &[f64], h: usize, w: usize, d: usize, p: &DsgaParams<f64>, k_max: usize) -> Vec<f64> {
    let n = h * w;
    let hid = p.fusion_w.shape()[0];
    let dw = p.down_w.data();
    let mut z = vec![vec![0.0; hid]; n];
    for i in 0..n {
        for c in 0..hid {
            let mut u = p.down_b.data()[c];
            for q in 0..d {
                u += x[i * d + q] * dw[q * hid + c];
            }
            z[i][c] = u * erf_cdf(u);
        }
    }
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| if nr > 0.0 { v / nr } else { 0.0 }).collect()
        })
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..hid).map(|c| unit[i][c] * unit[j][c]).sum();
            s[i][j] = (dot / (hid as f64).sqrt()).tanh();
        }
    }
    let sig = 1.0 / (1.0 + (-p.theta_k).exp());
    let k = ((sig * (k_max as f64 - 1.0) + 1.0).floor() as usize).clamp(1, k_max).min(n - 1);
    let lg = p.rank_logits.data();
    let mx = lg.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = lg.iter().map(|v| (v - mx).exp()).collect();
    let wr: Vec<f64> = e.iter().map(|v| v / e.iter().sum::<f64>()).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&p1, &p2| s[i][p2].partial_cmp(&s[i][p1]).unwrap().then(p1.cmp(&p2)));
        a[i][i] = 1.0;
        for (r, &j) in order.iter().take(k).enumerate() {
            a[i][j] = wr[r];
        }
        let sum: f64 = a[i].iter().sum();
        for v in a[i].iter_mut() {
            *v /= sum;
        }
    }
    let mut f = vec![vec![0.0; hid]; n];
    for i in 0..n {
        let mut g = vec![0.0; hid];
        for j in 0..n {
            for c in 0..hid {
                g[c] += a[i][j] * z[j][c];
            }
        }
        for c in 0..hid {
            f[i][c] = (0..hid).map(|q| g[q] * p.fusion_w.data()[q * hid + c]).sum();
        }
    }
    let refl = |i: isize, len: usize| -> usize {
        if len == 1 {
            0
        } else if i < 0 {
            1
        } else if i as usize >= len {
            len - 2
        } else {
            i as usize
        }
    };
    let sp = 1.0 / (1.0 + (-p.w_p).exp());
    let gate = 0.5 / (1.0 + (-p.w_n).exp());
    let mut out = x.to_vec();
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let mut mixed = vec![0.0; hid];
            for c in 0..hid {
                let mut window = Vec::new();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let j = refl(y as isize + dy, h) * w + refl(xx as isize + dx, w);
                        window.push(f[j][c]);
                    }
                }
                let mx = window.iter().cloned().fold(f64::MIN, f64::max);
                let av = window.iter().sum::<f64>() / 9.0;
                let pooled = sp * mx + (1.0 - sp) * av;
                mixed[c] = (1.0 - gate) * f[i][c] + gate * pooled;
            }
            for q in 0..d {
                let up: f64 = (0..hid).map(|c| mixed[c] * p.up_w.data()[c * d + q]).sum();
                out[i * d + q] += up + p.up_b.data()[q];
            }
        }
    }
    out
}

#[test]
fn forward_matches_straight_line_reference() {
    let cfg = DsgaConfig {
        reduction_ratio: 0.5,
        k_max: 3,
        ..DsgaConfig::new(4)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut params: DsgaParams<f64> = DsgaParams::init(&cfg, &mut rng);
    params.w_p = 0.3;
    params.w_n = -0.4;
    let x = Tensor::from_fn(&[1, 2, 2, 4], |_| rng.random_range(-1.0..1.0));
    let (out, graph) = dsga_forward(&x, &params, &cfg).unwrap();
    let reference = reference_forward(x.data(), 2, 2, 4, &params, 3);
    for (a, b) in out.data().iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(graph.elements[0].k, 2);
}

#[test]
fn forward_matches_reference_on_larger_fields() {
    for seed in 0..5 {
        let cfg = DsgaConfig {
            k_max: 5,
            ..DsgaConfig::new(8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: DsgaParams<f64> = DsgaParams::init(&cfg, &mut rng);
        params.theta_k = rng.random_range(-2.0..2.0);
        params.w_p = rng.random_range(-1.0..1.0);
        params.w_n = rng.random_range(-1.0..1.0);
        let x = Tensor::from_fn(&[1, 3, 4, 8], |_| rng.random_range(-1.0..1.0));
        let out = dsga_forward(&x, &params, &cfg).unwrap().0;
        let reference = reference_forward(x.data(), 3, 4, 8, &params, 5);
        for (a, b) in out.data().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn vjp_matches_finite_differences() {
    for seed in 0..4 {
        let cfg = DsgaConfig {
            k_max: 4,
            dropout_prob: 0.0,
            ..DsgaConfig::new(8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params: DsgaParams<f64> = DsgaParams::init(&cfg, &mut rng);
        params.w_p = rng.random_range(-1.0..1.0);
        params.w_n = rng.random_range(-1.0..1.0);
        params.rank_logits = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[2, 2, 3, 8], |_| rng.random_range(-1.0..1.0));
        let up = Tensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));

        let g = dsga_vjp(&x, &params, &cfg, &up).unwrap();
        let flat = Tensor::new(vec![params.count()], params.to_flat()).unwrap();
        let fd_params = finite_diff_grad(
            |t| {
                let p = DsgaParams::from_flat(&cfg, t.data()).unwrap();
                dsga_forward(&x, &p, &cfg).unwrap().0.dot(&up).unwrap()
            },
            &flat,
            FD_STEP,
        )
        .unwrap();
        // θ_k only feeds the floor in the neighbourhood size; it is excluded
        // from the comparison and must carry a zero cotangent.
        let theta_at = flat.len() - 3;
        assert_eq!(g.params.theta_k, 0.0);
        let mut analytic = g.params.to_flat();
        let mut numeric = fd_params.into_data();
        analytic.remove(theta_at);
        numeric.remove(theta_at);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "seed {seed}: params rel err {err}");

        let fd_x = finite_diff_grad(
            |t| dsga_forward(t, &params, &cfg).unwrap().0.dot(&up).unwrap(),
            &x,
            FD_STEP,
        )
        .unwrap();
        let err = max_relative_error(g.x.data(), fd_x.data());
        assert!(err <= 1e-4, "seed {seed}: input rel err {err}");
    }
}

#[test]
fn propagation_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, d) = (9, 3);
    let z = Tensor::from_fn(&[1, n, d], |_| rng.random_range(-1.0..1.0));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let zp = Tensor::from_fn(&[1, n, d], |i| z.data()[perm[i / d] * d + i % d]);
    let w = [0.5, 0.3, 0.2];
    let run = |t: &Tensor<f64>| {
        let s = similarity_matrix(t).unwrap();
        let g = graphadapt::dsga::build_graph(&s, 3, &w).unwrap();
        propagate(&g, t).unwrap()
    };
    let base = run(&z);
    let permuted = run(&zp);
    for i in 0..n {
        for c in 0..d {
            let a = permuted.data()[i * d + c];
            let b = base.data()[perm[i] * d + c];
            assert!((a - b).abs() < 1e-12);
        }
    }
}
