//! Unsupervised training objectives.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;

use crate::branch::Branches;
use crate::cloud::{nearest, NeighborIndex, Point, PointCloud, RigidTransform};
use crate::error::{invalid, Result};
use crate::matrix::RowMatrix;
use crate::math::ln;

/// Quadratic below `beta`, linear above, continuously differentiable.
pub fn huber(u: f64, beta: f64) -> f64 {
    let a = u.abs();
    if a <= beta {
        0.5 * u * u
    } else {
        beta * (a - 0.5 * beta)
    }
}

fn huber_grad(u: f64, beta: f64) -> f64 {
    if u.abs() <= beta {
        u
    } else {
        beta * u.signum()
    }
}

/// Symmetric Huber-robust nearest-neighbor loss, with the Huber penalty
/// applied to squared distances.
pub fn global_alignment_loss(moved: &PointCloud, target: &PointCloud, beta: f64) -> f64 {
    global_alignment_loss_with(moved, target, beta, true)
}

/// As [`global_alignment_loss`]; `huber_on_squared = false` penalizes the
/// plain distances instead.
pub fn global_alignment_loss_with(
    moved: &PointCloud,
    target: &PointCloud,
    beta: f64,
    huber_on_squared: bool,
) -> f64 {
    global_alignment_forward(
        moved.points(),
        target.points(),
        beta,
        huber_on_squared,
        &mut Branches::record(),
    )
    .0
}

/// Returns the loss and `dL/d moved`.
pub(crate) fn global_alignment_forward(
    moved: &[Point],
    target: &[Point],
    beta: f64,
    huber_on_squared: bool,
    branches: &mut Branches,
) -> (f64, Vec<Point>) {
    let mut loss = 0.0;
    let mut grad = vec![Point::zeros(); moved.len()];
    let mut term = |diff: Point, i: usize, grad: &mut Vec<Point>| {
        let sq = diff.norm_squared();
        // diff is always moved minus target
        let d_diff = if huber_on_squared {
            loss += huber(sq, beta);
            diff * (2.0 * huber_grad(sq, beta))
        } else {
            let d = sq.sqrt();
            loss += huber(d, beta);
            if d > 0.0 {
                diff * (huber_grad(d, beta) / d)
            } else {
                Point::zeros()
            }
        };
        grad[i] += d_diff;
    };
    for (i, p) in moved.iter().enumerate() {
        let j = branches.pick(|| nearest(target, p).0 as u32) as usize;
        term(p - target[j], i, &mut grad);
    }
    for q in target {
        let i = branches.pick(|| nearest(moved, q).0 as u32) as usize;
        term(moved[i] - q, i, &mut grad);
    }
    (loss, grad)
}

/// Sum over selected points and each of their `k` source neighbors `j` of
/// `‖R p_j + t - q'_j‖`, where `q'_j` is the pseudo target of `p_j`.
pub fn neighborhood_consensus_loss(
    selected: &[usize],
    transform: &RigidTransform,
    index: &NeighborIndex,
    source: &[Point],
    pseudo_targets: &[Point],
) -> f64 {
    neighborhood_consensus_forward(selected, transform, index, source, pseudo_targets).loss
}

pub(crate) struct ConsensusGrad {
    pub loss: f64,
    pub d_rotation: Matrix3<f64>,
    pub d_translation: Vector3<f64>,
    pub d_targets: Vec<Point>,
}

pub(crate) fn neighborhood_consensus_forward(
    selected: &[usize],
    transform: &RigidTransform,
    index: &NeighborIndex,
    source: &[Point],
    pseudo_targets: &[Point],
) -> ConsensusGrad {
    let mut out = ConsensusGrad {
        loss: 0.0,
        d_rotation: Matrix3::zeros(),
        d_translation: Vector3::zeros(),
        d_targets: vec![Point::zeros(); pseudo_targets.len()],
    };
    for &i in selected {
        for &j in index.neighbors(i) {
            let r = transform.apply(&source[j]) - pseudo_targets[j];
            let d = r.norm();
            out.loss += d;
            if d > 0.0 {
                let u = r / d;
                out.d_rotation += u * source[j].transpose();
                out.d_translation += u;
                out.d_targets[j] -= u;
            }
        }
    }
    out
}

/// Mean negative log-probability of each selected row's own argmax.
pub fn spatial_consistency_loss(refined_map: &RowMatrix, selected: &[usize]) -> Result<f64> {
    let mut d = RowMatrix::zeros(0, 0);
    spatial_consistency_forward(refined_map, selected, &mut Branches::record(), &mut d, false)
}

/// With `want_grad`, `d_map` receives `dL/dM'` (resized as needed); the
/// argmax column is a recorded branch and carries no gradient of its own.
pub(crate) fn spatial_consistency_forward(
    refined_map: &RowMatrix,
    selected: &[usize],
    branches: &mut Branches,
    d_map: &mut RowMatrix,
    want_grad: bool,
) -> Result<f64> {
    if selected.is_empty() {
        return Err(invalid!("spatial consistency needs at least one selected row"));
    }
    if want_grad {
        *d_map = RowMatrix::zeros(refined_map.rows(), refined_map.cols());
    }
    let scale = 1.0 / selected.len() as f64;
    let mut loss = 0.0;
    for &i in selected {
        if i >= refined_map.rows() {
            return Err(invalid!("selected row {i} is out of range"));
        }
        let row = refined_map.row(i);
        let j = branches.pick(|| argmax(row) as u32) as usize;
        loss -= scale * ln(row[j]);
        if want_grad {
            d_map[(i, j)] -= scale / row[j];
        }
    }
    Ok(loss)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// The three loss terms of one pipeline iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub global_alignment: f64,
    pub neighborhood_consensus: f64,
    pub spatial_consistency: f64,
}

/// Loss terms together with their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub global_alignment: f64,
    pub neighborhood_consensus: f64,
    pub spatial_consistency: f64,
    pub total: f64,
    pub gamma: f64,
    pub theta: f64,
    /// Huber threshold used for the global term.
    pub beta: f64,
}

impl LossBreakdown {
    /// Componentwise sum; the weights of `self` are kept.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.global_alignment += other.global_alignment;
        self.neighborhood_consensus += other.neighborhood_consensus;
        self.spatial_consistency += other.spatial_consistency;
        self.total += other.total;
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.global_alignment *= factor;
        self.neighborhood_consensus *= factor;
        self.spatial_consistency *= factor;
        self.total *= factor;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.global_alignment.is_finite()
            && self.neighborhood_consensus.is_finite()
            && self.spatial_consistency.is_finite()
    }
}

/// `L_g + gamma * L_n + theta * L_s`.
pub fn total_loss(parts: LossParts, gamma: f64, theta: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        global_alignment: parts.global_alignment,
        neighborhood_consensus: parts.neighborhood_consensus,
        spatial_consistency: parts.spatial_consistency,
        total: parts.global_alignment
            + gamma * parts.neighborhood_consensus
            + theta * parts.spatial_consistency,
        gamma,
        theta,
        beta,
    }
}
