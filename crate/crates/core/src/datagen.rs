//! Synthetic registration pairs: parametric shapes, random rigid motions,
//! half-space cropping and clipped Gaussian noise.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point, PointCloud, RigidTransform};
use crate::math::{cos, sin, standard_normal};
use crate::error::{invalid, Result};

/// Smallest cloud the generator produces.
pub const MIN_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    /// An asymmetric union of a slab, a ball and a post.
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Composite => "composite",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Noise level presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoisePreset {
    /// σ = 0.01 clipped to ±0.05, sized for unit-sphere clouds.
    #[default]
    Desk,
    /// σ = 0.5 clipped to ±1.0, far larger than the unit-sphere clouds.
    Paper,
}

impl NoisePreset {
    /// `(sigma, clip)`.
    pub fn sigma_clip(self) -> (f64, f64) {
        match self {
            NoisePreset::Desk => (0.01, 0.05),
            NoisePreset::Paper => (0.5, 1.0),
        }
    }
}

/// Everything needed to regenerate one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub shape: ShapeKind,
    pub points: usize,
    /// Range of each Euler angle, degrees.
    pub rotation_deg: [f64; 2],
    /// Range of each translation component.
    pub translation: [f64; 2],
    /// Fraction of points removed from each side.
    pub crop: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        let (noise_sigma, noise_clip) = NoisePreset::Desk.sigma_clip();
        Self {
            shape: ShapeKind::Composite,
            points: 128,
            rotation_deg: [0.0, 45.0],
            translation: [-0.5, 0.5],
            crop: 0.25,
            noise_sigma,
            noise_clip,
            seed: 0,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < MIN_POINTS {
            return Err(invalid!("need at least {MIN_POINTS} points, got {}", self.points));
        }
        check_range(self.rotation_deg, "rotation")?;
        check_range(self.translation, "translation")?;
        if !(0.0..=0.5).contains(&self.crop) {
            return Err(invalid!("crop fraction {} outside [0, 0.5]", self.crop));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_clip >= 0.0)
            || !self.noise_sigma.is_finite()
            || !self.noise_clip.is_finite()
        {
            return Err(invalid!("noise sigma and clip must be finite and non-negative"));
        }
        Ok(())
    }

    /// `count` specs that differ only in their seed, `seed + i`.
    pub fn series(&self, count: usize) -> Vec<PairSpec> {
        (0..count)
            .map(|i| PairSpec {
                seed: self.seed.wrapping_add(i as u64),
                ..self.clone()
            })
            .collect()
    }
}

fn check_range(r: [f64; 2], what: &str) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(invalid!("{what} range [{}, {}] is not ordered", r[0], r[1]));
    }
    Ok(())
}

/// A generated pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps source coordinates onto target coordinates.
    pub gt: RigidTransform,
    /// Whether each source point's counterpart survived in the target.
    pub inlier_mask: Vec<bool>,
}

/// `n` points spread uniformly by area over the surface of `kind`, centered
/// and scaled so the farthest point lies at distance 1.
///
/// The symmetric primitives are centered on their own center of symmetry,
/// so a sampled sphere stays exactly spherical; the composite is centered
/// on its sample centroid.
pub fn sample_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_POINTS {
        return Err(invalid!("need at least {MIN_POINTS} points, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Point> = (0..n)
        .map(|_| match kind {
            ShapeKind::Sphere => sphere(&mut rng, 1.0),
            ShapeKind::Cube => cuboid(&mut rng, Vector3::new(1.0, 1.0, 1.0)),
            ShapeKind::Torus => torus(&mut rng, 1.0, 0.4),
            ShapeKind::Cylinder => cylinder(&mut rng, 0.5, 1.0),
            ShapeKind::Composite => composite(&mut rng),
        })
        .collect();
    let center = match kind {
        ShapeKind::Composite => points.iter().sum::<Point>() / n as f64,
        _ => Point::zeros(),
    };
    Ok(normalize(points, center))
}

fn normalize(mut points: Vec<Point>, c: Point) -> PointCloud {
    let radius = points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    for p in points.iter_mut() {
        *p = (*p - c) / radius;
    }
    PointCloud::new(points).expect("finite non-empty")
}

fn sphere(rng: &mut ChaCha8Rng, r: f64) -> Point {
    loop {
        let v = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        let len = v.norm();
        if len > 1e-12 {
            return v * (r / len);
        }
    }
}

/// Surface of the box `[-h, h]`, faces chosen by area.
fn cuboid(rng: &mut ChaCha8Rng, h: Vector3<f64>) -> Point {
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = Vector3::new(
        rng.random_range(-h.x..h.x),
        rng.random_range(-h.y..h.y),
        rng.random_range(-h.z..h.z),
    );
    p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
    p
}

fn torus(rng: &mut ChaCha8Rng, major: f64, minor: f64) -> Point {
    let phi = rng.random_range(0.0..2.0 * PI);
    // area element grows with the distance from the axis
    let theta = loop {
        let t = rng.random_range(0.0..2.0 * PI);
        if rng.random_range(0.0..major + minor) < major + minor * cos(t) {
            break t;
        }
    };
    let ring = major + minor * cos(theta);
    Vector3::new(ring * cos(phi), ring * sin(phi), minor * sin(theta))
}

/// Closed cylinder along z with caps.
fn cylinder(rng: &mut ChaCha8Rng, radius: f64, half_height: f64) -> Point {
    let side = 2.0 * PI * radius * 2.0 * half_height;
    let caps = 2.0 * PI * radius * radius;
    let phi = rng.random_range(0.0..2.0 * PI);
    if rng.random_range(0.0..side + caps) < side {
        Vector3::new(radius * cos(phi), radius * sin(phi), rng.random_range(-half_height..half_height))
    } else {
        let r = radius * rng.random::<f64>().sqrt();
        let z = if rng.random_bool(0.5) { half_height } else { -half_height };
        Vector3::new(r * cos(phi), r * sin(phi), z)
    }
}

fn composite(rng: &mut ChaCha8Rng) -> Point {
    let slab = Vector3::new(1.0, 0.5, 0.3);
    let (ball_r, ball_c) = (0.35, Vector3::new(0.6, 0.3, 0.5));
    let (post_r, post_h, post_c) = (0.15, 0.4, Vector3::new(-0.7, -0.2, 0.6));
    let areas = [
        8.0 * (slab.x * slab.y + slab.y * slab.z + slab.x * slab.z),
        4.0 * PI * ball_r * ball_r,
        2.0 * PI * post_r * (2.0 * post_h) + 2.0 * PI * post_r * post_r,
    ];
    let pick = rng.random_range(0.0..areas.iter().sum::<f64>());
    if pick < areas[0] {
        cuboid(rng, slab)
    } else if pick < areas[0] + areas[1] {
        sphere(rng, ball_r) + ball_c
    } else {
        cylinder(rng, post_r, post_h) + post_c
    }
}

/// Rotation `Rz(yaw) Ry(pitch) Rx(roll)` with each angle uniform in
/// `rot_range_deg`, and each translation component uniform in `trans_range`.
pub fn random_transform(rot_range_deg: [f64; 2], trans_range: [f64; 2], seed: u64) -> Result<RigidTransform> {
    check_range(rot_range_deg, "rotation")?;
    check_range(trans_range, "translation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };
    let yaw = draw(rot_range_deg).to_radians();
    let pitch = draw(rot_range_deg).to_radians();
    let roll = draw(rot_range_deg).to_radians();
    let t = Vector3::new(draw(trans_range), draw(trans_range), draw(trans_range));
    let r = Rotation3::from_euler_angles(roll, pitch, yaw);
    RigidTransform::new(*r.matrix(), t)
}

/// Points kept by a crop of `fraction` out of `n`.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    // the small slack keeps exact products such as 0.7 * 100 from rounding up
    let keep = (n as f64 * (1.0 - fraction) - 1e-9).ceil() as usize;
    keep.clamp(1, n)
}

/// Builds a labeled pair from a clean `cloud`: the target is `transform`
/// applied to it, each side is cropped and perturbed independently.
pub fn make_pair(
    cloud: &PointCloud,
    transform: &RigidTransform,
    crop: f64,
    noise_sigma: f64,
    noise_clip: f64,
    seed: u64,
) -> Result<LabeledPair> {
    if !(0.0..=0.5).contains(&crop) {
        return Err(invalid!("crop fraction {crop} outside [0, 0.5]"));
    }
    if !(noise_sigma >= 0.0 && noise_clip >= 0.0) {
        return Err(invalid!("noise sigma and clip must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cloud.len();
    let ids: Vec<usize> = (0..n).map(|i| cloud.ids().map_or(i, |ids| ids[i])).collect();
    let moved: Vec<Point> = cloud.points().iter().map(|p| transform.apply(p)).collect();

    let keep = kept_count(n, crop);
    let src_keep = crop_indices(cloud.points(), keep, &mut rng);
    let dst_keep = crop_indices(&moved, keep, &mut rng);

    let perturb = |p: Point, rng: &mut ChaCha8Rng| {
        if noise_sigma > 0.0 {
            p.map(|c| c + (noise_sigma * standard_normal(rng)).clamp(-noise_clip, noise_clip))
        } else {
            p
        }
    };
    let src_points: Vec<Point> = src_keep.iter().map(|&i| perturb(*cloud.point(i), &mut rng)).collect();
    let dst_points: Vec<Point> = dst_keep.iter().map(|&i| perturb(moved[i], &mut rng)).collect();
    let src_ids: Vec<usize> = src_keep.iter().map(|&i| ids[i]).collect();
    let dst_ids: Vec<usize> = dst_keep.iter().map(|&i| ids[i]).collect();

    let mut present = dst_ids.clone();
    present.sort_unstable();
    let inlier_mask = src_ids.iter().map(|id| present.binary_search(id).is_ok()).collect();
    Ok(LabeledPair {
        source: PointCloud::with_ids(src_points, src_ids)?,
        target: PointCloud::with_ids(dst_points, dst_ids)?,
        gt: *transform,
        inlier_mask,
    })
}

/// Indices of the `keep` points farthest along a random direction, in
/// their original order.
fn crop_indices(points: &[Point], keep: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let dir = sphere(rng, 1.0);
    if keep >= points.len() {
        return (0..points.len()).collect();
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .dot(&dir)
            .total_cmp(&points[a].dot(&dir))
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Generates the pair described by `spec`; shape, motion and perturbation
/// each get their own seed derived from `spec.seed`.
pub fn generate_pair(spec: &PairSpec) -> Result<LabeledPair> {
    spec.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let (shape_seed, motion_seed, pair_seed) = (seeds.next_u64(), seeds.next_u64(), seeds.next_u64());
    let cloud = sample_shape(spec.shape, spec.points, shape_seed)?;
    let gt = random_transform(spec.rotation_deg, spec.translation, motion_seed)?;
    make_pair(&cloud, &gt, spec.crop, spec.noise_sigma, spec.noise_clip, pair_seed)
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::metrics::mie_metrics;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sphere_radii_and_determinism() {
        let c = sample_shape(ShapeKind::Sphere, 200, 3).unwrap();
        for p in c.points() {
            assert_abs_diff_eq!(p.norm(), 1.0, epsilon = 1e-9);
        }
        assert_eq!(c, sample_shape(ShapeKind::Sphere, 200, 3).unwrap());
        assert_ne!(c, sample_shape(ShapeKind::Sphere, 200, 4).unwrap());
    }

    #[test]
    fn all_shapes_are_normalized() {
        for kind in ShapeKind::ALL {
            let c = sample_shape(kind, 300, 11).unwrap();
            let tol = if kind == ShapeKind::Composite { 1e-12 } else { 0.2 };
            assert!(c.centroid().norm() < tol, "{}", kind.name());
            let r = c.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
            assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
            assert_eq!(ShapeKind::from_name(kind.name()), Some(kind));
        }
        assert!(sample_shape(ShapeKind::Cube, 31, 0).is_err());
    }

    #[test]
    fn cube_faces_share_points_by_area() {
        // six equal faces: each count is Binomial(1000, 1/6)
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let p = cuboid(&mut rng, Vector3::new(1.0, 1.0, 1.0));
            let axis = (0..3).find(|&a| p[a].abs() == 1.0).unwrap();
            counts[2 * axis + (p[axis] > 0.0) as usize] += 1;
        }
        let mean = n as f64 / 6.0;
        let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn zero_ranges_give_identity() {
        let t = random_transform([0.0, 0.0], [0.0, 0.0], 9).unwrap();
        assert_eq!(t, RigidTransform::identity());
        assert!(random_transform([10.0, 0.0], [0.0, 0.0], 9).is_err());
    }

    #[test]
    fn fixed_euler_angles_regression() {
        // arccos((tr(Rz Ry Rx) - 1) / 2) with all three angles at 45 degrees
        let t = random_transform([45.0, 45.0], [0.0, 0.0], 1).unwrap();
        let (angle, _) = mie_metrics(&t, &RigidTransform::identity());
        assert_abs_diff_eq!(angle, FIXED_45_ANGLE, epsilon = 1e-9);
    }

    const FIXED_45_ANGLE: f64 = 64.73682564555173;

    #[test]
    fn euler_angle_means() {
        let draws = 1000;
        let mut sums = [0.0; 3];
        for s in 0..draws {
            let t = random_transform([0.0, 45.0], [-0.5, 0.5], s).unwrap();
            let (a, _) = crate::metrics::euler_zyx(&t.rotation);
            for i in 0..3 {
                sums[i] += a[i];
            }
        }
        // uniform on [0, 45]: mean 22.5, sd 45 / sqrt(12)
        let sd_mean = 45.0 / 12f64.sqrt() / (draws as f64).sqrt();
        for s in sums {
            assert!((s / draws as f64 - 22.5).abs() < 3.0 * sd_mean, "{sums:?}");
        }
    }

    #[test]
    fn clean_pair_is_exact_image() {
        let cloud = sample_shape(ShapeKind::Torus, 64, 2).unwrap();
        let gt = random_transform([0.0, 45.0], [-0.5, 0.5], 3).unwrap();
        let pair = make_pair(&cloud, &gt, 0.0, 0.0, 0.0, 4).unwrap();
        assert!(pair.inlier_mask.iter().all(|m| *m));
        for (p, q) in pair.source.points().iter().zip(pair.target.points()) {
            assert!((gt.apply(p) - q).norm() < 1e-12);
        }
    }

    #[test]
    fn crop_sizes_and_mask() {
        let spec = PairSpec { points: 128, seed: 17, ..Default::default() };
        let pair = generate_pair(&spec).unwrap();
        assert_eq!(pair.source.len(), 96);
        assert_eq!(pair.target.len(), 96);
        assert_eq!(kept_count(100, 0.3), 70);
        assert_eq!(kept_count(33, 0.25), 25);
        // membership by brute force over ids
        let src_ids = pair.source.ids().unwrap();
        let dst_ids = pair.target.ids().unwrap();
        for (i, id) in src_ids.iter().enumerate() {
            assert_eq!(pair.inlier_mask[i], dst_ids.contains(id));
        }
        assert!(pair.inlier_mask.iter().any(|m| !m));
        // stable order
        assert!(src_ids.windows(2).all(|w| w[0] < w[1]));
        assert!(dst_ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn noise_is_clipped() {
        let cloud = sample_shape(ShapeKind::Sphere, 64, 1).unwrap();
        let pair = make_pair(&cloud, &RigidTransform::identity(), 0.0, 0.5, 0.05, 2).unwrap();
        for (p, q) in pair.source.points().iter().zip(cloud.points()) {
            assert!((p - q).amax() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn gt_maps_clean_ids() {
        let spec = PairSpec { noise_sigma: 0.0, seed: 3, ..Default::default() };
        let pair = generate_pair(&spec).unwrap();
        let src_ids = pair.source.ids().unwrap();
        let dst_ids = pair.target.ids().unwrap();
        for (i, id) in src_ids.iter().enumerate() {
            if let Some(j) = dst_ids.iter().position(|d| d == id) {
                assert!((pair.gt.apply(pair.source.point(i)) - pair.target.point(j)).norm() < 1e-12);
            }
        }
        assert_eq!(generate_pair(&spec).unwrap(), pair);
    }

    #[test]
    fn spec_validation() {
        assert!(PairSpec { points: 16, ..Default::default() }.validate().is_err());
        assert!(PairSpec { crop: 0.6, ..Default::default() }.validate().is_err());
        assert!(PairSpec { rotation_deg: [5.0, 1.0], ..Default::default() }.validate().is_err());
        assert!(PairSpec::default().validate().is_ok());
        let series = PairSpec { seed: 10, ..Default::default() }.series(3);
        assert_eq!(series.iter().map(|s| s.seed).collect::<Vec<_>>(), [10, 11, 12]);
    }
}
