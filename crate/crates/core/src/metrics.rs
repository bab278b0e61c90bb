//! Registration error metrics.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;

use crate::cloud::{apply_transform, nearest, PointCloud, RigidTransform};
use crate::math::{asin, atan2};

/// Pitch within this many degrees of ±90° marks an Euler decomposition as
/// gimbal locked.
pub const GIMBAL_TOLERANCE_DEG: f64 = 1e-6;

/// Errors of one registration against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    /// Mean absolute ZYX Euler angle error, degrees.
    pub mae_r: f64,
    pub mae_t: f64,
    /// Geodesic rotation error, degrees.
    pub mie_r: f64,
    pub mie_t: f64,
    pub chamfer: f64,
    /// Set when either rotation sits at an Euler singularity.
    pub gimbal_lock: bool,
}

/// Anisotropic errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeMetrics {
    pub mae_r: f64,
    pub mae_t: f64,
    pub gimbal_lock: bool,
}

/// Intrinsic ZYX angles `(yaw, pitch, roll)` in degrees with
/// `R = Rz(yaw) Ry(pitch) Rx(roll)`, plus the gimbal-lock flag.
pub fn euler_zyx(r: &Matrix3<f64>) -> ([f64; 3], bool) {
    let pitch = asin((-r[(2, 0)]).clamp(-1.0, 1.0));
    let locked = (pitch.abs().to_degrees() - 90.0).abs() < GIMBAL_TOLERANCE_DEG;
    let (yaw, roll) = if locked {
        // yaw and roll are coupled; put everything into yaw
        (atan2(-r[(0, 1)], r[(1, 1)]), 0.0)
    } else {
        (
            atan2(r[(1, 0)], r[(0, 0)]),
            atan2(r[(2, 1)], r[(2, 2)]),
        )
    };
    ([yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()], locked)
}

fn wrap_degrees(a: f64) -> f64 {
    let w = a - 360.0 * ((a + 180.0) / 360.0).floor();
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

pub fn mae_metrics(pred: &RigidTransform, gt: &RigidTransform) -> MaeMetrics {
    let (a, la) = euler_zyx(&pred.rotation);
    let (b, lb) = euler_zyx(&gt.rotation);
    let mae_r = a
        .iter()
        .zip(&b)
        .map(|(x, y)| wrap_degrees(x - y).abs())
        .sum::<f64>()
        / 3.0;
    let mae_t = (pred.translation - gt.translation).abs().sum() / 3.0;
    MaeMetrics {
        mae_r,
        mae_t,
        gimbal_lock: la || lb,
    }
}

/// `(MIE(R) in degrees, MIE(t))`.
pub fn mie_metrics(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    (
        rotation_angle_deg(&gt.rotation, &pred.rotation),
        (pred.translation - gt.translation).norm(),
    )
}

/// Angle of the relative rotation `aᵀ b`, degrees.
///
/// `atan2(sin, cos)` rather than `acos` of the trace, which loses about half
/// the digits near zero.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let e = a.transpose() * b;
    let cos = (e.trace() - 1.0) / 2.0;
    let sin = 0.5
        * Vector3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]).norm();
    atan2(sin, cos).to_degrees()
}

/// Mean squared nearest distance from `p` to `q` plus the same from `q` to `p`.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> f64 {
    let one_way = |a: &PointCloud, b: &PointCloud| {
        a.points().iter().map(|x| nearest(b.points(), x).1).sum::<f64>() / a.len() as f64
    };
    one_way(p, q) + one_way(q, p)
}

/// Every metric for `pred` against `gt`; Chamfer is measured between the
/// source moved by `pred` and the target.
pub fn evaluate(
    pred: &RigidTransform,
    gt: &RigidTransform,
    source: &PointCloud,
    target: &PointCloud,
) -> MetricReport {
    let mae = mae_metrics(pred, gt);
    let (mie_r, mie_t) = mie_metrics(pred, gt);
    MetricReport {
        mae_r: mae.mae_r,
        mae_t: mae.mae_t,
        mie_r,
        mie_t,
        chamfer: chamfer(&apply_transform(source, pred), target),
        gimbal_lock: mae.gimbal_lock,
    }
}

/// Area under the ROC curve of `scores` for the positive `labels`
/// (Mann-Whitney statistic, ties counted half). `None` if a class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = alloc::vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::cloud::Point;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transform(roll: f64, pitch: f64, yaw: f64, t: [f64; 3]) -> RigidTransform {
        RigidTransform::new(*Rotation3::from_euler_angles(roll, pitch, yaw).matrix(), Vector3::from(t)).unwrap()
    }

    #[test]
    fn equal_transforms_have_zero_error() {
        let t = transform(0.3, -0.4, 1.1, [0.1, 0.2, -0.3]);
        let (r, tr) = mie_metrics(&t, &t);
        assert_eq!(tr, 0.0);
        assert!(r < 1e-6);
        let m = mae_metrics(&t, &t);
        assert_eq!((m.mae_r, m.mae_t), (0.0, 0.0));
    }

    #[test]
    fn single_axis_rotation() {
        let pred = transform(0.0, 0.0, 10f64.to_radians(), [0.0; 3]);
        let id = RigidTransform::identity();
        assert_abs_diff_eq!(mie_metrics(&pred, &id).0, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(mae_metrics(&pred, &id).mae_r, 10.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn euler_round_trip_and_gimbal_flag() {
        // nalgebra's (roll, pitch, yaw) builds Rz(yaw) Ry(pitch) Rx(roll)
        let r = Rotation3::from_euler_angles(0.2, -0.5, 1.3);
        let (a, locked) = euler_zyx(r.matrix());
        assert!(!locked);
        assert_abs_diff_eq!(a[0], 1.3f64.to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(a[1], (-0.5f64).to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(a[2], 0.2f64.to_degrees(), epsilon = 1e-9);
        let lock = Rotation3::from_euler_angles(0.3, core::f64::consts::FRAC_PI_2, 0.1);
        assert!(euler_zyx(lock.matrix()).1);
    }

    #[test]
    fn chamfer_values() {
        let a = PointCloud::new(vec![Point::zeros()]).unwrap();
        let b = PointCloud::new(vec![Point::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(chamfer(&a, &b), 2.0);
        assert_eq!(chamfer(&a, &a), 0.0);
    }

    #[test]
    fn chamfer_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = |n: usize| -> Vec<Point> {
            (0..n).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let (p, q) = (pts(13), pts(9));
        let mut expect = 0.0;
        for x in &p {
            expect += q.iter().map(|y| (x - y).norm_squared()).fold(f64::MAX, f64::min) / 13.0;
        }
        for y in &q {
            expect += p.iter().map(|x| (x - y).norm_squared()).fold(f64::MAX, f64::min) / 9.0;
        }
        let got = chamfer(&PointCloud::new(p).unwrap(), &PointCloud::new(q).unwrap());
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9], &[true, true, false]), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.5, 0.6], &[true, true]), None);
        // pairwise oracle
        let s = [0.3, 0.7, 0.7, 0.1, 0.9, 0.4];
        let l = [true, false, true, false, true, false];
        let mut wins = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if l[i] && !l[j] {
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert_abs_diff_eq!(roc_auc(&s, &l).unwrap(), wins / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn tiny_and_half_turn_angles_are_accurate() {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, -1.0, 0.5));
        for theta in [1e-12, 1e-9, 1e-5, 0.3, core::f64::consts::PI - 1e-6] {
            let r = nalgebra::Rotation3::from_axis_angle(&axis, theta).into_inner();
            let got = rotation_angle_deg(&Matrix3::identity(), &r).to_radians();
            assert!((got - theta).abs() <= 1e-9 * theta.max(1e-6), "{theta}: {got}");
        }
    }

    proptest! {
        #[test]
        fn mie_matches_quaternion_angle(a in -3.0f64..3.0, b in -1.5f64..1.5, c in -3.0f64..3.0,
                                        d in -3.0f64..3.0, e in -1.5f64..1.5, f in -3.0f64..3.0) {
            let p = transform(a, b, c, [0.0; 3]);
            let g = transform(d, e, f, [0.0; 3]);
            let qp = UnitQuaternion::from_euler_angles(a, b, c);
            let qg = UnitQuaternion::from_euler_angles(d, e, f);
            let dot = qp.coords.dot(&qg.coords).abs().min(1.0);
            let oracle = (2.0 * dot.acos()).to_degrees();
            // the oracle's arccos loses digits near 0
            let angle = mie_metrics(&p, &g).0;
            prop_assume!(angle > 0.1);
            prop_assert!((angle - oracle).abs() < 1e-9);
        }

        #[test]
        fn chamfer_rigid_invariance(seed in 0u64..300, a in -3.0f64..3.0, b in -1.5f64..1.5, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = |n: usize| -> Vec<Point> {
                (0..n).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect()
            };
            let p = PointCloud::new(pts(10)).unwrap();
            let q = PointCloud::new(pts(7)).unwrap();
            let t = transform(a, b, c, [0.3, -1.0, 2.0]);
            let moved = chamfer(&apply_transform(&p, &t), &apply_transform(&q, &t));
            prop_assert!((moved - chamfer(&p, &q)).abs() < 1e-9);
        }
    }
}
