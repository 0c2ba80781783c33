//! Dynamic similarity graph: cosine similarity squashed by `tanh`, adaptive
//! neighbourhood size, rank-weighted top-k adjacency with a unit self-loop,
//! and row-normalized propagation.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_slice, Real, Tensor};
use crate::par;

/// `S = tanh(ẑ·ẑᵀ / √d)` per batch element, `z` shaped `[B, N, d]`.
pub fn similarity_matrix<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(z, "similarity_matrix")?;
    let per = par::map_range(b, |bi| similarity_block(&z.data()[bi * n * d..(bi + 1) * n * d], n, d));
    Ok(Tensor::from_parts(vec![b, n, n], per.concat()))
}

pub(crate) fn similarity_block<T: Real>(z: &[T], n: usize, d: usize) -> Vec<T> {
    let zn = normalize_rows(z, n, d);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let dot = (0..d).fold(T::zero(), |acc, c| acc + zn[i * d + c] * zn[j * d + c]);
            let v = (dot * scale).tanh();
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

fn normalize_rows<T: Real>(z: &[T], n: usize, d: usize) -> Vec<T> {
    let eps = T::of(crate::numerics::L2_EPS);
    let mut out = z.to_vec();
    for row in out.chunks_mut(d).take(n) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
    out
}

/// Cotangent of [`similarity_matrix`] with respect to `z`.
pub fn similarity_vjp<T: Real>(z: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(z, "similarity_vjp")?;
    if upstream.shape() != [b, n, n] {
        return Err(Error::ShapeMismatch {
            op: "similarity_vjp",
            left: vec![b, n, n],
            right: upstream.shape().to_vec(),
        });
    }
    let eps = T::of(crate::numerics::L2_EPS);
    let scale = T::one() / T::of(d as f64).sqrt();
    let per = par::map_range(b, |bi| {
        let zb = &z.data()[bi * n * d..(bi + 1) * n * d];
        let gs = &upstream.data()[bi * n * n..(bi + 1) * n * n];
        let zn = normalize_rows(zb, n, d);
        let s = similarity_block(zb, n, d);
        // through tanh, then the symmetric product
        let dc: Vec<T> = (0..n * n).map(|i| gs[i] * (T::one() - s[i] * s[i]) * scale).collect();
        let mut dzn = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..n {
                let w = dc[i * n + j] + dc[j * n + i];
                for c in 0..d {
                    dzn[i * d + c] = dzn[i * d + c] + w * zn[j * d + c];
                }
            }
        }
        let mut dz = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &zb[i * d..(i + 1) * d];
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if norm > eps {
                let proj = (0..d).fold(T::zero(), |a, c| a + zn[i * d + c] * dzn[i * d + c]);
                for c in 0..d {
                    dz[i * d + c] = (dzn[i * d + c] - zn[i * d + c] * proj) / norm;
                }
            } else {
                for c in 0..d {
                    dz[i * d + c] = dzn[i * d + c] / eps;
                }
            }
        }
        dz
    });
    Ok(Tensor::from_parts(vec![b, n, d], per.concat()))
}

/// Polynomial-decay logits `1 − (r / (K−1))^p`; a single rank gets logit 1.
pub fn init_rank_logits<T: Real>(k_max: usize, p: f64) -> Vec<T> {
    if k_max == 1 {
        return vec![T::one()];
    }
    (0..k_max)
        .map(|r| T::of(1.0 - (r as f64 / (k_max - 1) as f64).powf(p)))
        .collect()
}

/// Rank-specific edge weights: softmax of the raw logits.
pub fn rank_weights<T: Real>(raw: &[T]) -> Vec<T> {
    softmax_slice(raw)
}

/// Initial `θ_k = ln(K_max / 2)`.
pub fn init_theta_k<T: Real>(k_max: usize) -> T {
    T::of((k_max as f64 / 2.0).ln())
}

/// Neighbourhood size `clamp(⌊sigmoid(θ)·(K−1) + 1⌋, 1, K)`.
pub fn adaptive_k<T: Real>(theta_k: T, k_max: usize) -> usize {
    let raw = (sigmoid(theta_k) * T::of((k_max - 1) as f64) + T::one()).floor();
    let k = raw.to_usize().unwrap_or(1);
    k.clamp(1, k_max.max(1))
}

/// Sparse adjacency of one batch element. Row `i` holds a self-loop plus
/// `k` neighbours in rank order; weights are already row-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementGraph<T> {
    pub nodes: usize,
    pub k: usize,
    neighbors: Vec<usize>,
    neighbor_weights: Vec<T>,
    self_weights: Vec<T>,
    /// Raw similarities, kept only in debug builds.
    pub similarity: Option<Vec<T>>,
}

impl<T: Real> ElementGraph<T> {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbor_weights(&self, i: usize) -> &[T] {
        &self.neighbor_weights[i * self.k..(i + 1) * self.k]
    }

    pub fn self_weight(&self, i: usize) -> T {
        self.self_weights[i]
    }

    pub fn row_sum(&self, i: usize) -> T {
        self.neighbor_weights(i)
            .iter()
            .fold(self.self_weight(i), |a, &w| a + w)
    }

    /// Dense `N×N` adjacency.
    pub fn to_dense(&self) -> Vec<T> {
        let n = self.nodes;
        let mut a = vec![T::zero(); n * n];
        for i in 0..n {
            a[i * n + i] = self.self_weight(i);
            for (&j, &w) in self.neighbors(i).iter().zip(self.neighbor_weights(i)) {
                a[i * n + j] = a[i * n + j] + w;
            }
        }
        a
    }
}

/// Graphs for every element of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph<T> {
    /// Neighbourhood size requested before clamping to `N − 1`.
    pub requested_k: usize,
    pub elements: Vec<ElementGraph<T>>,
}

/// Builds the rank-weighted top-`k` graph from `s: [B, N, N]`.
///
/// Node `i` never competes for its own neighbourhood; ties go to the lower
/// index. When fewer than `k` other nodes exist, all of them are used.
pub fn build_graph<T: Real>(s: &Tensor<T>, k: usize, weights: &[T]) -> Result<SimilarityGraph<T>> {
    let (b, n, n2) = dims3(s, "build_graph")?;
    if n != n2 {
        return Err(Error::InvalidShape {
            op: "build_graph",
            detail: format!("similarity must be square, got {:?}", s.shape()),
        });
    }
    if k == 0 || k > weights.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside [1, {}] rank weights",
            weights.len()
        )));
    }
    let elements = par::map_range(b, |bi| {
        build_element(&s.data()[bi * n * n..(bi + 1) * n * n], n, k, weights)
    });
    Ok(SimilarityGraph {
        requested_k: k,
        elements,
    })
}

pub(crate) fn build_element<T: Real>(s: &[T], n: usize, k: usize, weights: &[T]) -> ElementGraph<T> {
    let k = k.min(n.saturating_sub(1));
    let total = weights[..k].iter().fold(T::one(), |a, &w| a + w);
    let mut neighbors = Vec::with_capacity(n * k);
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let row = &s[i * n..(i + 1) * n];
        let order = |&a: &usize, &b: &usize| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        };
        if k > 0 && k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, order);
        }
        let top = &mut candidates[..k];
        top.sort_unstable_by(order);
        neighbors.extend_from_slice(top);
    }
    let neighbor_weights = (0..n)
        .flat_map(|_| weights[..k].iter().map(move |&w| w / total))
        .collect();
    ElementGraph {
        nodes: n,
        k,
        neighbors,
        neighbor_weights,
        self_weights: vec![T::one() / total; n],
        similarity: cfg!(debug_assertions).then(|| s.to_vec()),
    }
}

/// `out_i = A_ii·z_i + Σ_r A_{i,r}·z_{nbr(i,r)}` over `z: [B, N, d]`.
pub fn propagate<T: Real>(graph: &SimilarityGraph<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(z, "propagate")?;
    if graph.elements.len() != b || graph.elements.iter().any(|g| g.nodes != n) {
        return Err(Error::invalid(format!(
            "graph over {} elements does not match features {:?}",
            graph.elements.len(),
            z.shape()
        )));
    }
    let per = par::map_range(b, |bi| {
        propagate_element(&graph.elements[bi], &z.data()[bi * n * d..(bi + 1) * n * d], d)
    });
    Ok(Tensor::from_parts(vec![b, n, d], per.concat()))
}

pub(crate) fn propagate_element<T: Real>(g: &ElementGraph<T>, z: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.nodes * d];
    for i in 0..g.nodes {
        let dst = &mut out[i * d..(i + 1) * d];
        let sw = g.self_weight(i);
        for c in 0..d {
            dst[c] = sw * z[i * d + c];
        }
        for (&j, &w) in g.neighbors(i).iter().zip(g.neighbor_weights(i)) {
            for c in 0..d {
                dst[c] = dst[c] + w * z[j * d + c];
            }
        }
    }
    out
}

/// Cotangents of [`propagate_element`]: returns `∂/∂z` and `∂/∂w` where `w`
/// are the un-normalized rank weights (softmax outputs) used to build `g`.
pub(crate) fn propagate_element_vjp<T: Real>(
    g: &ElementGraph<T>,
    z: &[T],
    propagated: &[T],
    upstream: &[T],
    weights: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let n = g.nodes;
    let mut dz = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); weights.len()];
    let total = weights[..g.k].iter().fold(T::one(), |a, &w| a + w);
    for i in 0..n {
        let gi = &upstream[i * d..(i + 1) * d];
        let sw = g.self_weight(i);
        for c in 0..d {
            dz[i * d + c] = dz[i * d + c] + sw * gi[c];
        }
        for (r, (&j, &w)) in g.neighbors(i).iter().zip(g.neighbor_weights(i)).enumerate() {
            let mut acc = T::zero();
            for c in 0..d {
                dz[j * d + c] = dz[j * d + c] + w * gi[c];
                acc = acc + gi[c] * (z[j * d + c] - propagated[i * d + c]);
            }
            dw[r] = dw[r] + acc / total;
        }
    }
    (dz, dw)
}

/// Pulls a cotangent on softmax outputs back to the logits.
pub(crate) fn softmax_vjp<T: Real>(probs: &[T], upstream: &[T]) -> Vec<T> {
    let inner = probs
        .iter()
        .zip(upstream)
        .fold(T::zero(), |a, (&p, &g)| a + p * g);
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

#[derive(Serialize)]
struct NeighborJson {
    index: usize,
    rank: usize,
    weight: f64,
}

#[derive(Serialize)]
struct NodeJson {
    node: usize,
    self_weight: f64,
    neighbors: Vec<NeighborJson>,
}

#[derive(Serialize)]
struct ElementJson {
    batch: usize,
    k: usize,
    nodes: Vec<NodeJson>,
}

#[derive(Serialize)]
struct GraphJson {
    requested_k: usize,
    elements: Vec<ElementJson>,
}

impl<T: Real> SimilarityGraph<T> {
    /// Per-node neighbour indices, ranks and normalized weights.
    pub fn to_json(&self) -> serde_json::Value {
        let elements = self
            .elements
            .iter()
            .enumerate()
            .map(|(batch, g)| ElementJson {
                batch,
                k: g.k,
                nodes: (0..g.nodes)
                    .map(|i| NodeJson {
                        node: i,
                        self_weight: g.self_weight(i).as_f64(),
                        neighbors: g
                            .neighbors(i)
                            .iter()
                            .zip(g.neighbor_weights(i))
                            .enumerate()
                            .map(|(rank, (&index, &w))| NeighborJson {
                                index,
                                rank,
                                weight: w.as_f64(),
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_value(GraphJson {
            requested_k: self.requested_k,
            elements,
        })
        .expect("graph serializes")
    }
}

fn dims3<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, n, d] if n >= 1 && d >= 1 => Ok((b, n, d)),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected [B, N, D] with N, D ≥ 1, got {:?}", t.shape()),
        }),
    }
}
