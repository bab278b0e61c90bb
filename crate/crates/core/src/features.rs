//! EdgeConv-style local descriptors.
//!
//! Each layer maps every edge `[x_k - x_i ; x_i]` (or just `x_k - x_i` when the
//! center channel is disabled) through a shared affine map and leaky-ReLU,
//! then max-pools over the k neighbors of point `i`. Later layers consume the
//! previous layer's pooled features in place of coordinates; the neighbor
//! graph is the spatial k-NN graph throughout.
//!
//! Because leaky-ReLU is monotone, pooling is done on the pre-activations:
//! `max_k leaky(z_k) = leaky(max_k z_k)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::branch::{leaky, Branches};
use crate::cloud::{NeighborIndex, PointCloud};
use crate::error::{invalid, Result};
use crate::matrix::RowMatrix;
use crate::params::NetworkParams;

/// Per-point descriptors, one row per point.
pub type FeatureMatrix = RowMatrix;

pub(crate) struct LayerCache {
    input: RowMatrix,
    /// Winning neighbor position per (point, channel).
    argmax: Vec<u32>,
    slope: Vec<f64>,
}

pub(crate) struct FeatureCache {
    layers: Vec<LayerCache>,
}

fn coordinates(cloud: &PointCloud) -> RowMatrix {
    let data = cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    RowMatrix::from_vec(cloud.len(), 3, data).expect("three columns per point")
}

/// Descriptor matrix of `cloud` (rows follow the cloud's point order).
pub fn extract_features(
    cloud: &PointCloud,
    index: &NeighborIndex,
    params: &NetworkParams,
) -> Result<FeatureMatrix> {
    features_forward(cloud, index, params, &mut Branches::record()).map(|(f, _)| f)
}

pub(crate) fn features_forward(
    cloud: &PointCloud,
    index: &NeighborIndex,
    params: &NetworkParams,
    branches: &mut Branches,
) -> Result<(FeatureMatrix, FeatureCache)> {
    if index.len() != cloud.len() {
        return Err(invalid!(
            "neighbor index covers {} points, cloud has {}",
            index.len(),
            cloud.len()
        ));
    }
    let cfg = params.config();
    let mut x = coordinates(cloud);
    let mut layers = Vec::with_capacity(cfg.feature_widths.len());
    for (l, &width) in cfg.feature_widths.iter().enumerate() {
        let w = params.values(2 * l);
        let b = params.values(2 * l + 1);
        let edge_dim = if cfg.center_channel { 2 * x.cols() } else { x.cols() };
        if w.len() != width * edge_dim || b.len() != width {
            return Err(invalid!("layer {l} parameters do not match its input width"));
        }
        let (out, cache) = edge_conv_forward(&x, index, w, b, width, cfg.center_channel, branches);
        layers.push(cache);
        x = out;
    }
    Ok((x, FeatureCache { layers }))
}

/// Splits the layer input into the neighbor term `A = X Waᵀ` and the center
/// term `B = X (Wb - Wa)ᵀ + b` so that `z[i,k] = A[nb(i,k)] + B[i]`.
fn edge_terms(
    x: &RowMatrix,
    w: &[f64],
    b: &[f64],
    width: usize,
    center: bool,
) -> (RowMatrix, RowMatrix) {
    let (n, cin) = (x.rows(), x.cols());
    let edge_dim = if center { 2 * cin } else { cin };
    let mut a = RowMatrix::zeros(n, width);
    let mut bm = RowMatrix::zeros(n, width);
    for i in 0..n {
        let xi = x.row(i);
        for c in 0..width {
            let wr = &w[c * edge_dim..(c + 1) * edge_dim];
            let (mut sa, mut sb) = (0.0, b[c]);
            for m in 0..cin {
                let wa = wr[m];
                let wb = if center { wr[cin + m] } else { 0.0 };
                sa += wa * xi[m];
                sb += (wb - wa) * xi[m];
            }
            a[(i, c)] = sa;
            bm[(i, c)] = sb;
        }
    }
    (a, bm)
}

fn edge_conv_forward(
    x: &RowMatrix,
    index: &NeighborIndex,
    w: &[f64],
    b: &[f64],
    width: usize,
    center: bool,
    branches: &mut Branches,
) -> (RowMatrix, LayerCache) {
    let n = x.rows();
    let (a, bm) = edge_terms(x, w, b, width, center);
    let mut out = RowMatrix::zeros(n, width);
    let mut argmax = vec![0u32; n * width];
    let mut slope = vec![0.0; n * width];
    for i in 0..n {
        let nbrs = index.neighbors(i);
        for c in 0..width {
            let pos = branches.pick(|| {
                let mut best = 0;
                for k in 1..nbrs.len() {
                    if a[(nbrs[k], c)] > a[(nbrs[best], c)] {
                        best = k;
                    }
                }
                best as u32
            });
            let z = a[(nbrs[pos as usize], c)] + bm[(i, c)];
            let (y, s) = leaky(z, branches);
            out[(i, c)] = y;
            argmax[i * width + c] = pos;
            slope[i * width + c] = s;
        }
    }
    (
        out,
        LayerCache {
            input: x.clone(),
            argmax,
            slope,
        },
    )
}

/// Accumulates parameter gradients given `d_out = dL/dFeatures`.
pub(crate) fn features_backward(
    index: &NeighborIndex,
    params: &NetworkParams,
    cache: &FeatureCache,
    d_out: &RowMatrix,
    grads: &mut NetworkParams,
) {
    let cfg = params.config();
    let center = cfg.center_channel;
    let mut d_y = d_out.clone();
    for (l, layer) in cache.layers.iter().enumerate().rev() {
        let x = &layer.input;
        let (n, cin) = (x.rows(), x.cols());
        let width = cfg.feature_widths[l];
        let edge_dim = if center { 2 * cin } else { cin };
        let mut d_a = RowMatrix::zeros(n, width);
        let mut d_b = RowMatrix::zeros(n, width);
        for i in 0..n {
            let nbrs = index.neighbors(i);
            for c in 0..width {
                let g = d_y[(i, c)] * layer.slope[i * width + c];
                let j = nbrs[layer.argmax[i * width + c] as usize];
                d_a[(j, c)] += g;
                d_b[(i, c)] += g;
            }
        }
        {
            let gw = grads.values_mut(2 * l);
            for c in 0..width {
                for i in 0..n {
                    let (ga, gb) = (d_a[(i, c)], d_b[(i, c)]);
                    if ga == 0.0 && gb == 0.0 {
                        continue;
                    }
                    let xi = x.row(i);
                    let row = &mut gw[c * edge_dim..(c + 1) * edge_dim];
                    for m in 0..cin {
                        row[m] += (ga - gb) * xi[m];
                        if center {
                            row[cin + m] += gb * xi[m];
                        }
                    }
                }
            }
        }
        {
            let gb = grads.values_mut(2 * l + 1);
            for i in 0..n {
                for c in 0..width {
                    gb[c] += d_b[(i, c)];
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = params.values(2 * l);
        let mut d_x = RowMatrix::zeros(n, cin);
        for i in 0..n {
            let dxi = d_x.row_mut(i);
            for c in 0..width {
                let (ga, gb) = (d_a[(i, c)], d_b[(i, c)]);
                if ga == 0.0 && gb == 0.0 {
                    continue;
                }
                let wr = &w[c * edge_dim..(c + 1) * edge_dim];
                for m in 0..cin {
                    let wb = if center { wr[cin + m] } else { 0.0 };
                    dxi[m] += (ga - gb) * wr[m] + gb * wb;
                }
            }
        }
        d_y = d_x;
    }
}
