//! Closed-form weighted rigid alignment and a point-to-point ICP baseline.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::cloud::{nearest, Point, PointCloud, RigidTransform};
use crate::error::{invalid, Error, Result};

/// Second singular value below this fraction of the first is rejected.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// Floor on `|σ̃_i + σ̃_j|` in the rotation derivative.
pub const SVD_GRAD_EPS: f64 = 1e-9;

/// Intermediate values of one weighted SVD solve.
#[derive(Debug, Clone)]
pub(crate) struct WsvdCache {
    pub normalized: Vec<f64>,
    pub weight_sum: f64,
    pub src_centroid: Vector3<f64>,
    pub dst_centroid: Vector3<f64>,
    pub u: Matrix3<f64>,
    pub singular: Vector3<f64>,
    pub reflect: f64,
    pub transform: RigidTransform,
}

impl WsvdCache {
    /// Signed singular values of the symmetric polar factor.
    fn signed_singular(&self) -> [f64; 3] {
        [self.singular[0], self.singular[1], self.reflect * self.singular[2]]
    }

    /// Smallest gap that enters a denominator of the rotation derivative.
    pub fn conditioning(&self) -> f64 {
        let s = self.signed_singular();
        let mut gap = f64::INFINITY;
        for i in 0..3 {
            for j in (i + 1)..3 {
                gap = gap
                    .min((s[i] + s[j]).abs())
                    .min((self.singular[i] - self.singular[j]).abs());
            }
        }
        gap
    }
}

/// Rigid transform minimizing `Σ w̃_i ‖R p_i + t - q_i‖²` with `w̃ = w / Σw`.
pub fn weighted_svd(src: &[Point], dst: &[Point], weights: &[f64]) -> Result<RigidTransform> {
    weighted_svd_cached(src, dst, weights, None).map(|c| c.transform)
}

pub(crate) fn weighted_svd_cached(
    src: &[Point],
    dst: &[Point],
    weights: &[f64],
    reflect: Option<f64>,
) -> Result<WsvdCache> {
    let n = src.len();
    if dst.len() != n || weights.len() != n {
        return Err(invalid!(
            "weighted SVD needs equal lengths, got {n}, {} and {}",
            dst.len(),
            weights.len()
        ));
    }
    if n < 3 {
        return Err(invalid!("weighted SVD needs at least 3 correspondences"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid!("weights must be finite and non-negative"));
    }
    let weight_sum: f64 = weights.iter().sum();
    if !(weight_sum > 0.0) {
        return Err(invalid!("weights sum to zero"));
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / weight_sum).collect();
    let mut src_centroid = Vector3::zeros();
    let mut dst_centroid = Vector3::zeros();
    for ((p, q), w) in src.iter().zip(dst).zip(&normalized) {
        src_centroid += p * *w;
        dst_centroid += q * *w;
    }
    let mut h = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(dst).zip(&normalized) {
        h += (p - src_centroid) * (q - dst_centroid).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let singular = svd.singular_values;
    if !(singular[1] > DEGENERACY_RATIO * singular[0]) {
        return Err(Error::DegenerateConfiguration(alloc::format!(
            "cross-covariance has rank < 2 (singular values {:e}, {:e}, {:e})",
            singular[0],
            singular[1],
            singular[2]
        )));
    }
    let v = v_t.transpose();
    let reflect = reflect.unwrap_or_else(|| (v * u.transpose()).determinant().signum());
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, reflect)) * u.transpose();
    let translation = dst_centroid - rotation * src_centroid;
    Ok(WsvdCache {
        normalized,
        weight_sum,
        src_centroid,
        dst_centroid,
        u,
        singular,
        reflect,
        transform: RigidTransform {
            rotation,
            translation,
        },
    })
}

/// Given `dL/dR` and `dL/dt`, returns `(dL/d dst, dL/d weights)`.
///
/// `R` is the special-orthogonal polar factor of `Hᵀ = R S`; its differential
/// is `dR = R Ω` with `Ω S + S Ω = Rᵀ dHᵀ - dH R`, solved in the eigenbasis
/// of `S` where the denominators are `σ̃_i + σ̃_j`.
pub(crate) fn weighted_svd_backward(
    cache: &WsvdCache,
    src: &[Point],
    dst: &[Point],
    d_rotation: &Matrix3<f64>,
    d_translation: &Vector3<f64>,
) -> (Vec<Point>, Vec<f64>) {
    let r = &cache.transform.rotation;
    // t = q̄ - R p̄
    let d_dst_centroid = *d_translation;
    let d_r = d_rotation - d_translation * cache.src_centroid.transpose();
    let d_src_centroid = -(r.transpose() * d_translation);

    let u = &cache.u;
    let sig = cache.signed_singular();
    let b = u.transpose() * (r.transpose() * d_r) * u;
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let mut den = sig[i] + sig[j];
                if den.abs() < SVD_GRAD_EPS {
                    den = if den < 0.0 { -SVD_GRAD_EPS } else { SVD_GRAD_EPS };
                }
                c[(i, j)] = b[(i, j)] / den;
            }
        }
    }
    let e = u * c * u.transpose();
    let d_a = r * (e - e.transpose());
    let d_h = d_a.transpose();

    let n = src.len();
    let w = &cache.normalized;
    let mut d_dst = Vec::with_capacity(n);
    let mut d_norm = Vec::with_capacity(n);
    for i in 0..n {
        let a = src[i] - cache.src_centroid;
        let bq = dst[i] - cache.dst_centroid;
        d_dst.push(d_h.transpose() * a * w[i] + d_dst_centroid * w[i]);
        d_norm.push(a.dot(&(d_h * bq)) + src[i].dot(&d_src_centroid) + dst[i].dot(&d_dst_centroid));
    }
    let mean: f64 = d_norm.iter().zip(w).map(|(g, wi)| g * wi).sum();
    let d_weights = d_norm.iter().map(|g| (g - mean) / cache.weight_sum).collect();
    (d_dst, d_weights)
}

/// Classic point-to-point ICP: nearest neighbors plus an unweighted SVD
/// solve, until the increment is below `tol` or `max_iters` is reached.
pub fn icp_baseline(
    source: &PointCloud,
    target: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> RigidTransform {
    let mut total = RigidTransform::identity();
    let mut moved: Vec<Point> = source.points().to_vec();
    let ones = alloc::vec![1.0; moved.len()];
    for _ in 0..max_iters {
        let matched: Vec<Point> = moved
            .iter()
            .map(|p| *target.point(nearest(target.points(), p).0))
            .collect();
        let Ok(step) = weighted_svd(&moved, &matched, &ones) else {
            break;
        };
        total = step.compose(&total);
        for p in moved.iter_mut() {
            *p = step.apply(p);
        }
        let change = (step.rotation - Matrix3::identity()).norm() + step.translation.norm();
        if change < tol {
            break;
        }
    }
    total
}
