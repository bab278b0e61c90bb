//! Geometry primitives: point clouds, rigid transforms and k-NN neighborhoods.

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{invalid, Result};

pub type Point = Vector3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// An ordered list of 3D points, optionally tagged with the index each
/// point had in the cloud it was cropped from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    ids: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(invalid!("point {i} has a non-finite coordinate"));
        }
        Ok(Self { points, ids: None })
    }

    pub fn with_ids(points: Vec<Point>, ids: Vec<usize>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if ids.len() != cloud.len() {
            return Err(invalid!(
                "{} ids supplied for {} points",
                ids.len(),
                cloud.len()
            ));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("point ids must be unique"));
        }
        cloud.ids = Some(ids);
        Ok(cloud)
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn ids(&self) -> Option<&[usize]> {
        self.ids.as_deref()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn centroid(&self) -> Point {
        let sum = self.points.iter().fold(Point::zeros(), |acc, p| acc + p);
        sum / self.len() as f64
    }

    /// Keeps the points at `indices` (in the given order), carrying ids along.
    pub fn select(&self, indices: &[usize]) -> Self {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let ids = indices.iter().map(|&i| self.id(i)).collect();
        Self {
            points,
            ids: Some(ids),
        }
    }

    /// Original index of point `i`, or `i` itself when no ids are attached.
    pub fn id(&self, i: usize) -> usize {
        self.ids.as_ref().map_or(i, |ids| ids[i])
    }

    pub(crate) fn map_points(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
            ids: self.ids.clone(),
        }
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// A rotation (orthonormal, determinant +1) followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(invalid!("transform has non-finite entries"));
        }
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > ROTATION_TOLERANCE {
            return Err(invalid!("rotation is not orthonormal (deviation {orth:e})"));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(invalid!("rotation determinant is {det}, expected +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_homogeneous();
        core::array::from_fn(|r| core::array::from_fn(|c| m[(r, c)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        if rows[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid!("last row of a homogeneous transform must be [0 0 0 1]"));
        }
        Self::new(rotation, translation)
    }
}

pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    cloud.map_points(|p| transform.apply(p))
}

pub fn compose(first_applied_last: &RigidTransform, applied_first: &RigidTransform) -> RigidTransform {
    first_applied_last.compose(applied_first)
}

pub fn invert(transform: &RigidTransform) -> RigidTransform {
    transform.inverse()
}

/// For every point, the `k` nearest other points of the same cloud, ordered
/// by ascending distance with ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.neighbors.chunks_exact(self.k)
    }
}

/// Exhaustive k-NN search. Self matches are excluded.
pub fn build_knn_index(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let n = cloud.len();
    if k == 0 {
        return Err(invalid!("k must be positive"));
    }
    if k >= n {
        return Err(invalid!("k = {k} requires more than {n} points"));
    }
    let pts = cloud.points();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let by_distance =
        |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (i, p) in pts.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p - q).norm_squared(), j)),
        );
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_distance);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_distance);
        neighbors.extend(scratch.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, neighbors })
}

/// Index of the nearest point in `cloud` to `query` (lowest index on ties)
/// and the squared distance to it.
pub fn nearest(cloud: &[Point], query: &Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in cloud.iter().enumerate() {
        let d = (query - q).norm_squared();
        if d.partial_cmp(&best.1) == Some(Ordering::Less) {
            best = (j, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point::new(rng.random(), rng.random(), rng.random()))
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(seed: u64) -> RigidTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random::<f64>() * 3.0);
        RigidTransform::new(*rot.matrix(), Vector3::new(rng.random(), rng.random(), rng.random())).unwrap()
    }

    fn brute_force_knn(cloud: &PointCloud, k: usize) -> Vec<Vec<usize>> {
        let pts = cloud.points();
        (0..pts.len())
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..pts.len())
                    .filter(|&j| j != i)
                    .map(|j| ((pts[i] - pts[j]).norm(), j))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn knn_collinear() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let idx = build_knn_index(&cloud, 1).unwrap();
        assert_eq!(idx.neighbors(0), &[1]);
        assert_eq!(idx.neighbors(1), &[0]);
        assert_eq!(idx.neighbors(2), &[1]);
    }

    #[test]
    fn knn_unit_square() {
        let cloud = PointCloud::from_arrays(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        let idx = build_knn_index(&cloud, 2).unwrap();
        assert_eq!(idx.neighbors(0), &[1, 3]);
        assert_eq!(idx.neighbors(1), &[0, 2]);
        assert_eq!(idx.neighbors(2), &[1, 3]);
        assert_eq!(idx.neighbors(3), &[0, 2]);
    }

    #[test]
    fn knn_matches_brute_force_64() {
        let cloud = random_cloud(64, 7);
        let idx = build_knn_index(&cloud, 8).unwrap();
        let oracle = brute_force_knn(&cloud, 8);
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(idx.neighbors(i), row.as_slice());
        }
    }

    #[test]
    fn knn_rejects_large_k() {
        let cloud = random_cloud(5, 1);
        assert!(matches!(build_knn_index(&cloud, 5), Err(crate::Error::InvalidArgument(_))));
        assert!(build_knn_index(&cloud, 0).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::from_arrays(&[[f64::NAN, 0.0, 0.0]]).is_err());
        let pts = vec![Point::zeros(), Point::x()];
        assert!(PointCloud::with_ids(pts.clone(), vec![3, 3]).is_err());
        assert!(PointCloud::with_ids(pts, vec![3, 4]).is_ok());
    }

    #[test]
    fn identity_and_quarter_turn() {
        let cloud = random_cloud(10, 3);
        assert_eq!(apply_transform(&cloud, &RigidTransform::identity()), cloud);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), core::f64::consts::FRAC_PI_2);
        let t = RigidTransform::new(*rz.matrix(), Vector3::zeros()).unwrap();
        let p = t.apply(&Point::x());
        assert_abs_diff_eq!(p, Point::y(), epsilon = 1e-12);
    }

    #[test]
    fn compose_and_invert_identities() {
        let t = random_transform(11);
        let id = RigidTransform::identity();
        assert_eq!(compose(&id, &t), t);
        assert_eq!(invert(&id), id);
        let round = compose(&invert(&t), &t);
        assert_abs_diff_eq!(round.rotation, Matrix3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(round.translation, Vector3::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn homogeneous_rows_round_trip() {
        let t = random_transform(5);
        assert_eq!(RigidTransform::from_rows(&t.to_rows()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn transform_round_trip(seed in 0u64..1000, cseed in 0u64..1000) {
            let cloud = random_cloud(20, cseed);
            let t = random_transform(seed);
            let back = apply_transform(&apply_transform(&cloud, &t), &invert(&t));
            for (a, b) in back.points().iter().zip(cloud.points()) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }

        #[test]
        fn compose_matches_sequential_application(s1 in 0u64..500, s2 in 500u64..1000) {
            let (t1, t2) = (random_transform(s1), random_transform(s2));
            let p = Point::new(0.3, -0.2, 0.9);
            prop_assert!((compose(&t1, &t2).apply(&p) - t1.apply(&t2.apply(&p))).norm() < 1e-12);
        }

        #[test]
        fn rigidity_preserves_distances(seed in 0u64..1000) {
            let cloud = random_cloud(12, seed);
            let moved = apply_transform(&cloud, &random_transform(seed + 1));
            for i in 0..12 {
                for j in 0..12 {
                    let d0 = (cloud.point(i) - cloud.point(j)).norm();
                    let d1 = (moved.point(i) - moved.point(j)).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn knn_equals_oracle(n in 2usize..48, seed in 0u64..10_000) {
            let cloud = random_cloud(n, seed);
            let k = 1 + (seed as usize % (n - 1));
            let idx = build_knn_index(&cloud, k).unwrap();
            let again = build_knn_index(&cloud, k).unwrap();
            prop_assert_eq!(&idx, &again);
            for (i, row) in brute_force_knn(&cloud, k).iter().enumerate() {
                prop_assert_eq!(idx.neighbors(i), row.as_slice());
            }
        }
    }
}
