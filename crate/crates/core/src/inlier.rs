//! Inlier confidence from the structural difference between a source
//! neighborhood and the neighborhood formed by its pseudo targets.
//!
//! Per point `i` and neighbor slot `k` (canonical k-NN order):
//!
//! ```text
//! e_ik   = v(p_i - p_k) - v(q'_i - q'_k)
//! tau_ik = softmax_k u(e_ik)
//! w_i    = 1 - tanh |g(Σ_k tau_ik e_ik)|
//! ```
//!
//! `v` lifts each 3-vector edge to `c` channels (affine + leaky-ReLU) and then
//! convolves along the ordered neighbor axis with a window of 1 or 3 and
//! replicate padding. The convolution is linear, so it is applied once to the
//! difference of the lifted edges; its bias cancels exactly.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;

use crate::branch::{leaky, Branches};
use crate::cloud::{NeighborIndex, Point, PointCloud};
use crate::error::{invalid, Result};
use crate::matching::{softmax_backward_row, softmax_in_place};
use crate::params::{InlierHead, NetworkParams};
use crate::math::tanh;

/// Source and pseudo-target edges, `k` per point, in neighbor order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    k: usize,
    pub source_edges: Vec<Point>,
    pub pseudo_edges: Vec<Point>,
}

impl EdgeSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.source_edges.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.source_edges.is_empty()
    }

    pub fn source(&self, i: usize) -> &[Point] {
        &self.source_edges[i * self.k..(i + 1) * self.k]
    }

    pub fn pseudo(&self, i: usize) -> &[Point] {
        &self.pseudo_edges[i * self.k..(i + 1) * self.k]
    }
}

/// Per source point: its pseudo target, inlier weight, and neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub source: PointCloud,
    pub pseudo_targets: Vec<Point>,
    pub weights: Vec<f64>,
    pub neighbors: NeighborIndex,
}

/// `e^p_ik = p_i - p_k` and `e^q'_ik = q'_i - q'_k` where `k` runs over the
/// source neighborhood of `i`; the pseudo neighborhood reuses that order.
pub fn build_edge_sets(
    source: &PointCloud,
    pseudo_targets: &[Point],
    index: &NeighborIndex,
) -> Result<EdgeSet> {
    let n = source.len();
    if pseudo_targets.len() != n || index.len() != n {
        return Err(invalid!(
            "edge construction needs {n} pseudo targets and neighbor lists"
        ));
    }
    let k = index.k();
    let mut source_edges = Vec::with_capacity(n * k);
    let mut pseudo_edges = Vec::with_capacity(n * k);
    for i in 0..n {
        for &j in index.neighbors(i) {
            source_edges.push(source.point(i) - source.point(j));
            pseudo_edges.push(pseudo_targets[i] - pseudo_targets[j]);
        }
    }
    Ok(EdgeSet {
        k,
        source_edges,
        pseudo_edges,
    })
}

/// Indices of the `k_prime` largest weights, highest first; ties go to the
/// lower index.
pub fn select_inliers(weights: &[f64], k_prime: usize) -> Result<Vec<usize>> {
    if k_prime == 0 || k_prime > weights.len() {
        return Err(invalid!(
            "k' = {k_prime} must lie in 1..={}",
            weights.len()
        ));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let cmp = |a: &usize, b: &usize| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b));
    if k_prime < order.len() {
        order.select_nth_unstable_by(k_prime - 1, cmp);
        order.truncate(k_prime);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// Inlier confidences `w_i ∈ (0, 1]` for every point of `edges`.
pub fn evaluate_inliers(edges: &EdgeSet, params: &NetworkParams) -> Result<Vec<f64>> {
    if params.config().inlier_head != InlierHead::GraphDifference {
        return Err(invalid!("graph-difference evaluation needs the graph inlier head"));
    }
    check_head_shapes(params, edges.k())?;
    let (w, _) = graph_head_forward(edges, params, &mut Branches::record());
    Ok(w)
}

pub(crate) fn check_head_shapes(params: &NetworkParams, k: usize) -> Result<()> {
    let cfg = params.config();
    let c = cfg.edge_channels;
    let s = params.head_slots().first;
    let expect: Vec<usize> = match cfg.inlier_head {
        InlierHead::GraphDifference => {
            vec![3 * c, c, c * c * cfg.kernel_width, c, c, c * c, c]
        }
        #[cfg(feature = "ablation")]
        InlierHead::ConcatMlp => vec![6 * c, c, c, 1],
    };
    if params.tensors().len() != s + expect.len() {
        return Err(invalid!("inlier evaluator tensors missing"));
    }
    for (o, len) in expect.into_iter().enumerate() {
        if params.values(s + o).len() != len {
            return Err(invalid!(
                "tensor {} has {} values, expected {len}",
                params.tensors()[s + o].name,
                params.values(s + o).len()
            ));
        }
    }
    if k == 0 {
        return Err(invalid!("empty neighborhoods"));
    }
    Ok(())
}

// Offsets of the graph-head tensors relative to the first head slot.
const LIFT_W: usize = 0;
const LIFT_B: usize = 1;
const CONV_W: usize = 2;
const U_W: usize = 4;
const G0_W: usize = 5;
const G1_W: usize = 6;

/// Everything the backward pass needs for one point.
pub(crate) struct PointCache {
    lift_slope_p: Vec<f64>,
    lift_slope_q: Vec<f64>,
    diff: Vec<f64>,
    fused: Vec<f64>,
    tau: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    hidden_slope: Vec<f64>,
    g: f64,
    g_sign: f64,
}

pub(crate) struct HeadCache {
    points: Vec<PointCache>,
}

#[inline]
fn conv_tap(k: usize, t: usize, half: usize, len: usize) -> usize {
    (k + t).saturating_sub(half).min(len - 1)
}

fn lift(
    edge: &Point,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    slope: &mut [f64],
    branches: &mut Branches,
) {
    for c in 0..out.len() {
        let z = w[3 * c] * edge.x + w[3 * c + 1] * edge.y + w[3 * c + 2] * edge.z + b[c];
        let (y, s) = leaky(z, branches);
        out[c] = y;
        slope[c] = s;
    }
}

pub(crate) fn graph_head_forward(
    edges: &EdgeSet,
    params: &NetworkParams,
    branches: &mut Branches,
) -> (Vec<f64>, HeadCache) {
    let cfg = params.config();
    let (c, kw) = (cfg.edge_channels, cfg.kernel_width);
    let half = kw / 2;
    let k = edges.k();
    let s0 = params.head_slots().first;
    let t = |o: usize| params.values(s0 + o);
    let (lift_w, lift_b, conv_w, u_w) = (t(LIFT_W), t(LIFT_B), t(CONV_W), t(U_W));
    let (g0_w, g1_w) = (t(G0_W), t(G1_W));

    let n = edges.len();
    let mut weights = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut hp = vec![0.0; c];
    let mut hq = vec![0.0; c];
    for i in 0..n {
        let mut lift_slope_p = vec![0.0; k * c];
        let mut lift_slope_q = vec![0.0; k * c];
        let mut diff = vec![0.0; k * c];
        for (kk, (ep, eq)) in edges.source(i).iter().zip(edges.pseudo(i)).enumerate() {
            let r = kk * c..(kk + 1) * c;
            lift(ep, lift_w, lift_b, &mut hp, &mut lift_slope_p[r.clone()], branches);
            lift(eq, lift_w, lift_b, &mut hq, &mut lift_slope_q[r.clone()], branches);
            for ((d, a), b) in diff[r].iter_mut().zip(&hp).zip(&hq) {
                *d = a - b;
            }
        }
        let mut fused = vec![0.0; k * c];
        for kk in 0..k {
            for co in 0..c {
                let mut acc = 0.0;
                for ci in 0..c {
                    let wrow = &conv_w[(co * c + ci) * kw..(co * c + ci + 1) * kw];
                    for (tap, &wv) in wrow.iter().enumerate() {
                        acc += wv * diff[conv_tap(kk, tap, half, k) * c + ci];
                    }
                }
                fused[kk * c + co] = acc;
            }
        }
        let mut tau: Vec<f64> = (0..k)
            .map(|kk| (0..c).map(|co| u_w[co] * fused[kk * c + co]).sum())
            .collect();
        softmax_in_place(&mut tau);
        let mut pooled = vec![0.0; c];
        for kk in 0..k {
            for co in 0..c {
                pooled[co] += tau[kk] * fused[kk * c + co];
            }
        }
        let mut hidden = vec![0.0; c];
        let mut hidden_slope = vec![0.0; c];
        for h in 0..c {
            let z: f64 = g0_w[h * c..(h + 1) * c]
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum();
            let (y, s) = leaky(z, branches);
            hidden[h] = y;
            hidden_slope[h] = s;
        }
        let g: f64 = g1_w.iter().zip(&hidden).map(|(a, b)| a * b).sum();
        let g_sign = match branches.pick(|| (g > 0.0) as u32 + 2 * (g < 0.0) as u32) {
            1 => 1.0,
            2 => -1.0,
            _ => 0.0,
        };
        weights.push(1.0 - tanh(g_sign * g));
        caches.push(PointCache {
            lift_slope_p,
            lift_slope_q,
            diff,
            fused,
            tau,
            pooled,
            hidden,
            hidden_slope,
            g,
            g_sign,
        });
    }
    (weights, HeadCache { points: caches })
}

/// Accumulates head gradients and returns `dL/dq'` given `dL/dw`.
pub(crate) fn graph_head_backward(
    edges: &EdgeSet,
    index: &NeighborIndex,
    params: &NetworkParams,
    cache: &HeadCache,
    d_weights: &[f64],
    grads: &mut NetworkParams,
) -> Vec<Point> {
    let cfg = params.config();
    let (c, kw) = (cfg.edge_channels, cfg.kernel_width);
    let half = kw / 2;
    let k = edges.k();
    let s0 = params.head_slots().first;
    let t = |o: usize| params.values(s0 + o);
    let (lift_w, conv_w, u_w, g0_w, g1_w) = (t(LIFT_W), t(CONV_W), t(U_W), t(G0_W), t(G1_W));

    let n = edges.len();
    let mut d_lift_w = vec![0.0; 3 * c];
    let mut d_lift_b = vec![0.0; c];
    let mut d_conv_w = vec![0.0; c * c * kw];
    let mut d_u_w = vec![0.0; c];
    let mut d_g0_w = vec![0.0; c * c];
    let mut d_g1_w = vec![0.0; c];
    let mut d_targets = vec![Point::zeros(); n];

    let mut d_hidden = vec![0.0; c];
    let mut d_pooled = vec![0.0; c];
    let mut d_fused = vec![0.0; k * c];
    let mut d_diff = vec![0.0; k * c];
    let mut d_tau = vec![0.0; k];
    let mut d_u = vec![0.0; k];
    for i in 0..n {
        let pc = &cache.points[i];
        let dw = d_weights[i];
        if dw == 0.0 {
            continue;
        }
        let a = pc.g_sign * pc.g;
        let th = tanh(a);
        let dg = -dw * (1.0 - th * th) * pc.g_sign;
        if dg == 0.0 {
            continue;
        }
        for h in 0..c {
            d_g1_w[h] += dg * pc.hidden[h];
            d_hidden[h] = dg * g1_w[h] * pc.hidden_slope[h];
        }
        d_pooled.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..c {
            let gh = d_hidden[h];
            let row = &g0_w[h * c..(h + 1) * c];
            for ci in 0..c {
                d_g0_w[h * c + ci] += gh * pc.pooled[ci];
                d_pooled[ci] += gh * row[ci];
            }
        }
        // pooled = Σ_k tau_k fused_k
        for kk in 0..k {
            let f = &pc.fused[kk * c..(kk + 1) * c];
            d_tau[kk] = f.iter().zip(&d_pooled).map(|(a, b)| a * b).sum();
            for co in 0..c {
                d_fused[kk * c + co] = pc.tau[kk] * d_pooled[co];
            }
        }
        softmax_backward_row(&pc.tau, &d_tau, &mut d_u);
        for kk in 0..k {
            for co in 0..c {
                d_u_w[co] += d_u[kk] * pc.fused[kk * c + co];
                d_fused[kk * c + co] += d_u[kk] * u_w[co];
            }
        }
        d_diff.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            for co in 0..c {
                let g = d_fused[kk * c + co];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    let base = (co * c + ci) * kw;
                    for tap in 0..kw {
                        let src = conv_tap(kk, tap, half, k) * c + ci;
                        d_conv_w[base + tap] += g * pc.diff[src];
                        d_diff[src] += g * conv_w[base + tap];
                    }
                }
            }
        }
        let nbrs = index.neighbors(i);
        for kk in 0..k {
            let ep = &edges.source(i)[kk];
            let eq = &edges.pseudo(i)[kk];
            let mut d_eq = Point::zeros();
            for co in 0..c {
                let g = d_diff[kk * c + co];
                let gp = g * pc.lift_slope_p[kk * c + co];
                let gq = -g * pc.lift_slope_q[kk * c + co];
                d_lift_b[co] += gp + gq;
                for m in 0..3 {
                    d_lift_w[3 * co + m] += gp * ep[m] + gq * eq[m];
                    d_eq[m] += gq * lift_w[3 * co + m];
                }
            }
            d_targets[i] += d_eq;
            d_targets[nbrs[kk]] -= d_eq;
        }
    }
    let mut add = |o: usize, src: &[f64]| {
        for (a, b) in grads.values_mut(s0 + o).iter_mut().zip(src) {
            *a += b;
        }
    };
    add(LIFT_W, &d_lift_w);
    add(LIFT_B, &d_lift_b);
    add(CONV_W, &d_conv_w);
    add(U_W, &d_u_w);
    add(G0_W, &d_g0_w);
    add(G1_W, &d_g1_w);
    d_targets
}

/// Ablation head: `w_i = 1 - tanh|mlp([p_i ; q'_i])|`.
#[cfg(feature = "ablation")]
pub(crate) mod concat {
    use super::*;

    pub(crate) struct ConcatCache {
        hidden: Vec<f64>,
        slope: Vec<f64>,
        g: Vec<f64>,
        sign: Vec<f64>,
    }

    pub(crate) fn forward(
        source: &PointCloud,
        targets: &[Point],
        params: &NetworkParams,
        branches: &mut Branches,
    ) -> (Vec<f64>, ConcatCache) {
        let c = params.config().edge_channels;
        let s0 = params.head_slots().first;
        let (w0, b0, w1, b1) = (
            params.values(s0),
            params.values(s0 + 1),
            params.values(s0 + 2),
            params.values(s0 + 3),
        );
        let n = targets.len();
        let mut cache = ConcatCache {
            hidden: vec![0.0; n * c],
            slope: vec![0.0; n * c],
            g: vec![0.0; n],
            sign: vec![0.0; n],
        };
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let x = input(source.point(i), &targets[i]);
            let mut g = b1[0];
            for h in 0..c {
                let z = b0[h] + (0..6).map(|m| w0[6 * h + m] * x[m]).sum::<f64>();
                let (y, s) = leaky(z, branches);
                cache.hidden[i * c + h] = y;
                cache.slope[i * c + h] = s;
                g += w1[h] * y;
            }
            let sign = match branches.pick(|| (g > 0.0) as u32 + 2 * (g < 0.0) as u32) {
                1 => 1.0,
                2 => -1.0,
                _ => 0.0,
            };
            cache.g[i] = g;
            cache.sign[i] = sign;
            weights.push(1.0 - tanh(sign * g));
        }
        (weights, cache)
    }

    fn input(p: &Point, q: &Point) -> [f64; 6] {
        [p.x, p.y, p.z, q.x, q.y, q.z]
    }

    pub(crate) fn backward(
        source: &PointCloud,
        targets: &[Point],
        params: &NetworkParams,
        cache: &ConcatCache,
        d_weights: &[f64],
        grads: &mut NetworkParams,
    ) -> Vec<Point> {
        let c = params.config().edge_channels;
        let s0 = params.head_slots().first;
        let (w0, w1) = (params.values(s0).to_vec(), params.values(s0 + 2).to_vec());
        let mut d_targets = vec![Point::zeros(); targets.len()];
        for i in 0..targets.len() {
            let th = tanh(cache.sign[i] * cache.g[i]);
            let dg = -d_weights[i] * (1.0 - th * th) * cache.sign[i];
            if dg == 0.0 {
                continue;
            }
            let x = input(source.point(i), &targets[i]);
            grads.values_mut(s0 + 3)[0] += dg;
            for h in 0..c {
                grads.values_mut(s0 + 2)[h] += dg * cache.hidden[i * c + h];
                let dz = dg * w1[h] * cache.slope[i * c + h];
                grads.values_mut(s0 + 1)[h] += dz;
                let gw0 = grads.values_mut(s0);
                for m in 0..6 {
                    gw0[6 * h + m] += dz * x[m];
                }
                for m in 0..3 {
                    d_targets[i][m] += dz * w0[6 * h + 3 + m];
                }
            }
        }
        d_targets
    }
}
