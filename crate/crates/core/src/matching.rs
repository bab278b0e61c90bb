//! Point-wise matching map, neighborhood-consensus refinement and the soft
//! point predictor.

use alloc::vec::Vec;

#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;

use crate::cloud::{NeighborIndex, Point, PointCloud};
use crate::error::{invalid, Result};
use crate::matrix::RowMatrix;
use crate::math::exp;

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_rows(logits: &RowMatrix) -> RowMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given `y = softmax(z)` row-wise and `dy`, returns `dz`.
pub(crate) fn softmax_rows_backward(y: &RowMatrix, dy: &RowMatrix) -> RowMatrix {
    let mut dz = RowMatrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        softmax_backward_row(y.row(i), dy.row(i), dz.row_mut(i));
    }
    dz
}

#[inline]
pub(crate) fn softmax_backward_row(y: &[f64], dy: &[f64], dz: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((z, &yy), &g) in dz.iter_mut().zip(y).zip(dy) {
        *z = yy * (g - dot);
    }
}

/// Euclidean feature distances `D` and the point-wise map `M = softmax(-D)`.
pub fn pointwise_map(
    feat_p: &RowMatrix,
    feat_q: &RowMatrix,
) -> Result<(RowMatrix, RowMatrix)> {
    if feat_p.cols() != feat_q.cols() {
        return Err(invalid!(
            "descriptor dimensions differ: {} vs {}",
            feat_p.cols(),
            feat_q.cols()
        ));
    }
    let (n, m) = (feat_p.rows(), feat_q.rows());
    let mut dist = RowMatrix::zeros(n, m);
    for i in 0..n {
        let fi = feat_p.row(i);
        for j in 0..m {
            let s: f64 = fi
                .iter()
                .zip(feat_q.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[(i, j)] = s.sqrt();
        }
    }
    let map = softmax_rows(&dist.map(|d| -d));
    Ok((dist, map))
}

/// `S[i,j] = (1/K) Σ_{i'∈N(p_i)} Σ_{j'∈N(q_j)} M[i',j']`.
///
/// The K²-term double sum is divided by K, not K².
pub fn neighborhood_scores(
    point_map: &RowMatrix,
    index_p: &NeighborIndex,
    index_q: &NeighborIndex,
) -> Result<RowMatrix> {
    let k = index_p.k();
    if index_q.k() != k {
        return Err(invalid!(
            "source and target neighborhoods differ in size: {k} vs {}",
            index_q.k()
        ));
    }
    let (n, m) = (point_map.rows(), point_map.cols());
    if index_p.len() != n || index_q.len() != m {
        return Err(invalid!("neighbor indices do not match the {n}x{m} map"));
    }
    // row_sums[i, j'] = Σ_{i'∈N(p_i)} M[i', j']
    let mut row_sums = RowMatrix::zeros(n, m);
    for i in 0..n {
        let acc = row_sums.row_mut(i);
        for &ip in index_p.neighbors(i) {
            for (a, v) in acc.iter_mut().zip(point_map.row(ip)) {
                *a += v;
            }
        }
    }
    let inv_k = 1.0 / k as f64;
    let mut scores = RowMatrix::zeros(n, m);
    for i in 0..n {
        let src = row_sums.row(i);
        let dst = scores.row_mut(i);
        for (j, out) in dst.iter_mut().enumerate() {
            let s: f64 = index_q.neighbors(j).iter().map(|&jp| src[jp]).sum();
            *out = s * inv_k;
        }
    }
    Ok(scores)
}

pub(crate) fn neighborhood_scores_backward(
    d_scores: &RowMatrix,
    index_p: &NeighborIndex,
    index_q: &NeighborIndex,
) -> RowMatrix {
    let (n, m) = (d_scores.rows(), d_scores.cols());
    let inv_k = 1.0 / index_p.k() as f64;
    let mut d_row_sums = RowMatrix::zeros(n, m);
    for i in 0..n {
        let ds = d_scores.row(i);
        let dt = d_row_sums.row_mut(i);
        for (j, &g) in ds.iter().enumerate() {
            for &jp in index_q.neighbors(j) {
                dt[jp] += g * inv_k;
            }
        }
    }
    let mut d_map = RowMatrix::zeros(n, m);
    for i in 0..n {
        for &ip in index_p.neighbors(i) {
            let src = d_row_sums.row(i);
            for (a, v) in d_map.row_mut(ip).iter_mut().zip(src) {
                *a += v;
            }
        }
    }
    d_map
}

/// `D' = exp(α - S) ⊙ D` and `M' = softmax(-D')`.
pub fn refine_map(
    distances: &RowMatrix,
    scores: &RowMatrix,
    alpha: f64,
) -> Result<(RowMatrix, RowMatrix)> {
    if distances.rows() != scores.rows() || distances.cols() != scores.cols() {
        return Err(invalid!("distance and score matrices differ in shape"));
    }
    let mut refined = distances.clone();
    for (d, s) in refined.as_mut_slice().iter_mut().zip(scores.as_slice()) {
        *d *= exp(alpha - s);
    }
    let map = softmax_rows(&refined.map(|d| -d));
    Ok((refined, map))
}

/// Soft correspondences `q'_i = Σ_j M'[i,j] q_j`.
pub fn predict_pseudo_targets(refined_map: &RowMatrix, target: &PointCloud) -> Result<Vec<Point>> {
    if refined_map.cols() != target.len() {
        return Err(invalid!(
            "map has {} columns, target has {} points",
            refined_map.cols(),
            target.len()
        ));
    }
    Ok(refined_map
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(target.points())
                .fold(Point::zeros(), |acc, (w, q)| acc + q * *w)
        })
        .collect())
}

/// Matching maps of one pipeline iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMap {
    pub distances: RowMatrix,
    pub point_map: RowMatrix,
    pub scores: RowMatrix,
    pub refined_distances: RowMatrix,
    pub refined_map: RowMatrix,
    pub alpha: f64,
}

impl MatchingMap {
    /// Runs the whole chain. With `refine == false` the refined map is the
    /// point-wise map itself and the scores are left at zero.
    pub fn compute(
        feat_p: &RowMatrix,
        feat_q: &RowMatrix,
        index_p: &NeighborIndex,
        index_q: &NeighborIndex,
        alpha: f64,
        refine: bool,
    ) -> Result<Self> {
        let (distances, point_map) = pointwise_map(feat_p, feat_q)?;
        let (scores, refined_distances, refined_map) = if refine {
            let scores = neighborhood_scores(&point_map, index_p, index_q)?;
            let (rd, rm) = refine_map(&distances, &scores, alpha)?;
            (scores, rd, rm)
        } else {
            (
                RowMatrix::zeros(distances.rows(), distances.cols()),
                distances.clone(),
                point_map.clone(),
            )
        };
        Ok(Self {
            distances,
            point_map,
            scores,
            refined_distances,
            refined_map,
            alpha,
        })
    }

    /// Propagates `dL/dM'` back to the two descriptor matrices.
    pub(crate) fn backward(
        &self,
        feat_p: &RowMatrix,
        feat_q: &RowMatrix,
        index_p: &NeighborIndex,
        index_q: &NeighborIndex,
        d_refined_map: &RowMatrix,
        refine: bool,
    ) -> (RowMatrix, RowMatrix) {
        let (n, m) = (self.distances.rows(), self.distances.cols());
        // M' = softmax(-D')
        let d_refined_dist = softmax_rows_backward(&self.refined_map, d_refined_map).map(|g| -g);
        let mut d_dist = RowMatrix::zeros(n, m);
        if refine {
            let mut d_scores = RowMatrix::zeros(n, m);
            for idx in 0..n * m {
                let g = d_refined_dist.as_slice()[idx];
                let factor = exp(self.alpha - self.scores.as_slice()[idx]);
                d_dist.as_mut_slice()[idx] = g * factor;
                d_scores.as_mut_slice()[idx] = -g * self.refined_distances.as_slice()[idx];
            }
            let d_map = neighborhood_scores_backward(&d_scores, index_p, index_q);
            let d_logits = softmax_rows_backward(&self.point_map, &d_map);
            for (a, g) in d_dist.as_mut_slice().iter_mut().zip(d_logits.as_slice()) {
                *a -= g;
            }
        } else {
            d_dist = d_refined_dist;
        }
        distance_backward(feat_p, feat_q, &self.distances, &d_dist)
    }
}

fn distance_backward(
    feat_p: &RowMatrix,
    feat_q: &RowMatrix,
    dist: &RowMatrix,
    d_dist: &RowMatrix,
) -> (RowMatrix, RowMatrix) {
    let d = feat_p.cols();
    let mut dp = RowMatrix::zeros(feat_p.rows(), d);
    let mut dq = RowMatrix::zeros(feat_q.rows(), d);
    for i in 0..feat_p.rows() {
        for j in 0..feat_q.rows() {
            let dd = dist[(i, j)];
            if dd == 0.0 {
                continue;
            }
            let g = d_dist[(i, j)] / dd;
            let (fi, fj) = (feat_p.row(i), feat_q.row(j));
            let dpi = &mut dp.as_mut_slice()[i * d..(i + 1) * d];
            for (a, (x, y)) in dpi.iter_mut().zip(fi.iter().zip(fj)) {
                *a += g * (x - y);
            }
            let dqj = &mut dq.as_mut_slice()[j * d..(j + 1) * d];
            for (a, (x, y)) in dqj.iter_mut().zip(fi.iter().zip(fj)) {
                *a -= g * (x - y);
            }
        }
    }
    (dp, dq)
}

pub(crate) fn pseudo_targets_backward(d_targets: &[Point], target: &PointCloud) -> RowMatrix {
    let mut d_map = RowMatrix::zeros(d_targets.len(), target.len());
    for (i, g) in d_targets.iter().enumerate() {
        for (a, q) in d_map.row_mut(i).iter_mut().zip(target.points()) {
            *a = g.dot(q);
        }
    }
    d_map
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use alloc::vec;
    use crate::cloud::build_knn_index;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> RowMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RowMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_stochastic(rows: usize, cols: usize, seed: u64) -> RowMatrix {
        let mut m = random_matrix(rows, cols, seed).map(|v| v.abs() + 0.01);
        for i in 0..rows {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect()).unwrap()
    }

    fn brute_force_scores(map: &RowMatrix, ip: &NeighborIndex, iq: &NeighborIndex) -> RowMatrix {
        let k = ip.k() as f64;
        let mut s = RowMatrix::zeros(map.rows(), map.cols());
        for i in 0..map.rows() {
            for j in 0..map.cols() {
                let mut acc = 0.0;
                for &a in ip.neighbors(i) {
                    for &b in iq.neighbors(j) {
                        acc += map[(a, b)];
                    }
                }
                s[(i, j)] = acc / k;
            }
        }
        s
    }

    #[test]
    fn identical_features_match_themselves() {
        let f = random_matrix(6, 4, 1);
        let (d, m) = pointwise_map(&f, &f).unwrap();
        for i in 0..6 {
            assert_eq!(d[(i, i)], 0.0);
            let row = m.row(i);
            let best = (0..6).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(best, i);
        }
    }

    #[test]
    fn single_target_gives_ones() {
        let (_, m) = pointwise_map(&random_matrix(5, 3, 2), &random_matrix(1, 3, 3)).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let (fp, fq) = (random_matrix(4, 3, 4), random_matrix(2, 3, 5));
        let (d, m) = pointwise_map(&fp, &fq).unwrap();
        for i in 0..4 {
            let d0 = fp.row(i).iter().zip(fq.row(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d1 = fp.row(i).iter().zip(fq.row(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert_abs_diff_eq!(d[(i, 0)], d0, epsilon = 1e-12);
            let z = (-d0).exp() + (-d1).exp();
            assert_abs_diff_eq!(m[(i, 0)], (-d0).exp() / z, epsilon = 1e-12);
            assert_abs_diff_eq!(m[(i, 1)], (-d1).exp() / z, epsilon = 1e-12);
        }
        assert!(pointwise_map(&fp, &random_matrix(2, 4, 6)).is_err());
    }

    #[test]
    fn uniform_map_scores() {
        let (cp, cq) = (random_cloud(7, 1), random_cloud(5, 2));
        let (ip, iq) = (build_knn_index(&cp, 3).unwrap(), build_knn_index(&cq, 3).unwrap());
        let uniform = RowMatrix::from_vec(7, 5, vec![0.2; 35]).unwrap();
        let s = neighborhood_scores(&uniform, &ip, &iq).unwrap();
        for &v in s.as_slice() {
            assert_abs_diff_eq!(v, 3.0 / 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sharp_map_with_single_neighbor() {
        // K = 1, permutation-like map: S[i,j] = M[nb(i), nb(j)]
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let idx = build_knn_index(&cloud, 1).unwrap();
        let mut m = RowMatrix::zeros(3, 3);
        for i in 0..3 {
            m[(i, i)] = 1.0;
        }
        let s = neighborhood_scores(&m, &idx, &idx).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = m[(idx.neighbors(i)[0], idx.neighbors(j)[0])];
                assert_eq!(s[(i, j)], expect);
            }
        }
    }

    #[test]
    fn scores_match_brute_force_small() {
        let (cp, cq) = (random_cloud(5, 3), random_cloud(5, 4));
        let (ip, iq) = (build_knn_index(&cp, 2).unwrap(), build_knn_index(&cq, 2).unwrap());
        let m = random_stochastic(5, 5, 8);
        let s = neighborhood_scores(&m, &ip, &iq).unwrap();
        let oracle = brute_force_scores(&m, &ip, &iq);
        for (a, b) in s.as_slice().iter().zip(oracle.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let iq3 = build_knn_index(&cq, 3).unwrap();
        assert!(neighborhood_scores(&m, &ip, &iq3).is_err());
    }

    #[test]
    fn refinement_identity_when_scores_equal_alpha() {
        let (d, m) = pointwise_map(&random_matrix(4, 3, 1), &random_matrix(6, 3, 2)).unwrap();
        let s = RowMatrix::from_vec(4, 6, vec![0.7; 24]).unwrap();
        let (dr, mr) = refine_map(&d, &s, 0.7).unwrap();
        assert_eq!(dr, d);
        for (a, b) in mr.as_slice().iter().zip(m.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn higher_score_flips_tie() {
        let d = RowMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let s = RowMatrix::from_vec(1, 2, vec![0.2, 0.9]).unwrap();
        let (dr, mr) = refine_map(&d, &s, 1.0).unwrap();
        assert!(dr[(0, 1)] < dr[(0, 0)]);
        assert!(mr[(0, 1)] > mr[(0, 0)]);
    }

    #[test]
    fn common_row_factor_preserves_ranking() {
        let (d, m) = pointwise_map(&random_matrix(5, 3, 7), &random_matrix(8, 3, 8)).unwrap();
        let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap();
        for alpha in [0.0, 1.0, 2.5] {
            let s = RowMatrix::from_vec(5, 8, vec![0.3; 40]).unwrap();
            let (_, mr) = refine_map(&d, &s, alpha).unwrap();
            for i in 0..5 {
                assert_eq!(argmax(mr.row(i)), argmax(m.row(i)));
            }
        }
    }

    #[test]
    fn pseudo_targets() {
        let q = random_cloud(3, 9);
        let onehot = RowMatrix::from_rows(&[&[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(predict_pseudo_targets(&onehot, &q).unwrap()[0], *q.point(1));
        let uniform = RowMatrix::from_rows(&[&[1.0 / 3.0; 3]]).unwrap();
        assert_abs_diff_eq!(predict_pseudo_targets(&uniform, &q).unwrap()[0], q.centroid(), epsilon = 1e-12);
        let w = RowMatrix::from_rows(&[&[0.2, 0.5, 0.3]]).unwrap();
        let direct = q.point(0) * 0.2 + q.point(1) * 0.5 + q.point(2) * 0.3;
        assert_abs_diff_eq!(predict_pseudo_targets(&w, &q).unwrap()[0], direct, epsilon = 1e-12);
        assert!(predict_pseudo_targets(&w, &random_cloud(4, 1)).is_err());
    }

    proptest! {
        #[test]
        fn scores_equal_brute_force(n in 3usize..=32, m in 3usize..=32, k in 1usize..3, seed in 0u64..1000) {
            let (cp, cq) = (random_cloud(n, seed), random_cloud(m, seed + 1));
            let (ip, iq) = (build_knn_index(&cp, k).unwrap(), build_knn_index(&cq, k).unwrap());
            let map = random_stochastic(n, m, seed + 2);
            let s = neighborhood_scores(&map, &ip, &iq).unwrap();
            let oracle = brute_force_scores(&map, &ip, &iq);
            for (a, b) in s.as_slice().iter().zip(oracle.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn maps_are_row_stochastic(n in 1usize..10, m in 2usize..10, scale in 0.1f64..300.0, seed in 0u64..1000) {
            let fp = random_matrix(n, 4, seed).map(|v| v * scale);
            let fq = random_matrix(m, 4, seed + 7).map(|v| v * scale);
            let (d, map) = pointwise_map(&fp, &fq).unwrap();
            let s = random_matrix(n, m, seed + 3).map(|v| v.abs() * 4.0);
            let (_, refined) = refine_map(&d, &s, 1.0).unwrap();
            for mat in [&map, &refined] {
                for row in mat.row_iter() {
                    let sum: f64 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }

        #[test]
        fn pseudo_targets_inside_target_hull(seed in 0u64..1000) {
            // four targets span a tetrahedron; barycentric coordinates of every
            // pseudo target must be non-negative
            let q = random_cloud(4, seed);
            let map = random_stochastic(6, 4, seed + 1);
            let p = q.points();
            let basis = nalgebra::Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
            prop_assume!(basis.determinant().abs() > 1e-6);
            let inv = basis.try_inverse().unwrap();
            for t in predict_pseudo_targets(&map, &q).unwrap() {
                let l = inv * (t - p[0]);
                let l0 = 1.0 - l.sum();
                prop_assert!(l0 >= -1e-9 && l.iter().all(|&v| v >= -1e-9));
            }
        }
    }
}
