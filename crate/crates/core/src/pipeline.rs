//! The iterative registration pipeline: descriptors, matching, inlier
//! weighting and weighted SVD, repeated on the re-transformed source.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::branch::Branches;
use crate::cloud::{apply_transform, build_knn_index, Point, PointCloud, RigidTransform};
use crate::error::{invalid, Error, Result};
use crate::features::{features_backward, features_forward};
use crate::inlier::{
    build_edge_sets, check_head_shapes, graph_head_backward, graph_head_forward, select_inliers,
    EdgeSet, HeadCache,
};
use crate::losses::{
    global_alignment_forward, neighborhood_consensus_forward, spatial_consistency_forward,
    total_loss, LossBreakdown, LossParts,
};
use crate::matching::{predict_pseudo_targets, pseudo_targets_backward, MatchingMap};
use crate::matrix::RowMatrix;
use crate::params::{InlierHead, NetworkParams};
use crate::solver::{weighted_svd_backward, weighted_svd_cached};

/// Singular value gaps below this make the rotation derivative unreliable.
pub const CONDITIONING_FLOOR: f64 = 1e-6;

/// Hyperparameters of one registration run and of its losses.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Neighborhood-consensus offset in the refined distance `exp(alpha - S) * D`.
    pub alpha: f64,
    /// Huber threshold of the global alignment loss.
    pub beta: f64,
    /// Weight of the neighborhood consensus loss.
    pub gamma: f64,
    /// Weight of the spatial consistency loss.
    pub theta: f64,
    /// Neighborhood size, shared by descriptors, consensus and edges.
    pub k: usize,
    /// Number of selected inliers; `None` means half the source, rounded down.
    pub k_prime: Option<usize>,
    pub iterations: usize,
    /// Whether to apply neighborhood-consensus refinement of the matching map.
    pub refine: bool,
    pub huber_on_squared: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.05,
            gamma: 1.0,
            theta: 0.1,
            k: 8,
            k_prime: None,
            iterations: 3,
            refine: true,
            huber_on_squared: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(invalid!("alpha must be finite"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(invalid!("beta must be positive"));
        }
        if !(self.gamma >= 0.0 && self.theta >= 0.0) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        if self.k == 0 || self.iterations == 0 || self.k_prime == Some(0) {
            return Err(invalid!("k, k_prime and iterations must be positive"));
        }
        Ok(())
    }

    /// Inlier count used for a source of `n` points.
    pub fn k_prime_for(&self, n: usize) -> usize {
        self.k_prime.unwrap_or(n / 2).clamp(1, n)
    }
}

/// State produced by one pipeline iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub increment: RigidTransform,
    /// Pseudo target of every source point, in the frame of the target.
    pub pseudo_targets: Vec<Point>,
    pub weights: Vec<f64>,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Composition of all increments, latest applied last.
    pub transform: RigidTransform,
    pub per_iteration: Vec<IterationRecord>,
    pub iterations: usize,
}

impl RegistrationResult {
    /// Loss summed over iterations.
    pub fn total_loss(&self) -> f64 {
        self.per_iteration.iter().map(|r| r.losses.total).sum()
    }
}

/// Registers `source` onto `target`.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    params: &NetworkParams,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let run = run_pipeline(
        source,
        target,
        params,
        config,
        &RunOptions::default(),
        &mut Branches::record(),
        None,
    )?;
    Ok(run.result)
}

#[derive(Debug, Default)]
pub(crate) struct RunOptions<'a> {
    /// Per-iteration input transforms; when absent they are chained from
    /// the increments.
    pub starts: Option<&'a [RigidTransform]>,
    /// Fail with [`Error::IllConditioned`] on nearly repeated singular values.
    pub check_conditioning: bool,
}

pub(crate) struct PipelineRun {
    pub result: RegistrationResult,
    /// Input transform of every iteration.
    pub starts: Vec<RigidTransform>,
}

enum HeadState {
    Graph(EdgeSet, HeadCache),
    #[cfg(feature = "ablation")]
    Concat(crate::inlier::concat::ConcatCache),
}

/// Forward pass, and with `grads` the truncated backward pass: each
/// iteration's input transform is a constant, so iteration `t` only
/// back-propagates into the parameters through its own computation and the
/// shared target descriptors.
pub(crate) fn run_pipeline(
    source: &PointCloud,
    target: &PointCloud,
    params: &NetworkParams,
    config: &RegistrationConfig,
    options: &RunOptions<'_>,
    branches: &mut Branches,
    mut grads: Option<&mut NetworkParams>,
) -> Result<PipelineRun> {
    config.validate()?;
    let k = config.k;
    if source.len() <= k || target.len() <= k {
        return Err(invalid!(
            "both clouds need more than k = {k} points (got {} and {})",
            source.len(),
            target.len()
        ));
    }
    if let Some(starts) = options.starts {
        if starts.len() != config.iterations {
            return Err(invalid!("need one start transform per iteration"));
        }
    }
    check_head_shapes(params, k)?;
    let index_p = build_knn_index(source, k)?;
    let index_q = build_knn_index(target, k)?;
    let (feat_q, cache_q) = features_forward(target, &index_q, params, branches)?;
    let mut d_feat_q = RowMatrix::zeros(feat_q.rows(), feat_q.cols());
    let k_prime = config.k_prime_for(source.len());

    let mut cumulative = RigidTransform::identity();
    let mut per_iteration = Vec::with_capacity(config.iterations);
    let mut starts = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let start = match options.starts {
            Some(s) => s[it],
            None => cumulative,
        };
        starts.push(start);
        let current = apply_transform(source, &start);
        let (feat_p, cache_p) = features_forward(&current, &index_p, params, branches)?;
        let map = MatchingMap::compute(&feat_p, &feat_q, &index_p, &index_q, config.alpha, config.refine)?;
        let pseudo = predict_pseudo_targets(&map.refined_map, target)?;

        let (weights, head) = match params.config().inlier_head {
            InlierHead::GraphDifference => {
                let edges = build_edge_sets(&current, &pseudo, &index_p)?;
                let (w, cache) = graph_head_forward(&edges, params, branches);
                (w, HeadState::Graph(edges, cache))
            }
            #[cfg(feature = "ablation")]
            InlierHead::ConcatMlp => {
                let (w, cache) = crate::inlier::concat::forward(&current, &pseudo, params, branches);
                (w, HeadState::Concat(cache))
            }
        };

        let mut svd = weighted_svd_cached(current.points(), &pseudo, &weights, None)?;
        let positive = branches.pick(|| (svd.reflect > 0.0) as u32) == 1;
        if positive != (svd.reflect > 0.0) {
            let sign = if positive { 1.0 } else { -1.0 };
            svd = weighted_svd_cached(current.points(), &pseudo, &weights, Some(sign))?;
        }
        if options.check_conditioning && svd.conditioning() < CONDITIONING_FLOOR {
            return Err(Error::IllConditioned(format!(
                "singular values {:?} at iteration {it}",
                svd.singular.as_slice()
            )));
        }
        let increment = svd.transform;

        // losses
        let moved: Vec<Point> = current.points().iter().map(|p| increment.apply(p)).collect();
        let (l_g, d_moved) = global_alignment_forward(
            &moved,
            target.points(),
            config.beta,
            config.huber_on_squared,
            branches,
        );
        let selected: Vec<usize> = select_inliers(&weights, k_prime)?
            .into_iter()
            .map(|i| branches.pick(|| i as u32) as usize)
            .collect();
        let consensus = neighborhood_consensus_forward(
            &selected,
            &increment,
            &index_p,
            current.points(),
            &pseudo,
        );
        let mut d_map_s = RowMatrix::zeros(0, 0);
        let l_s = spatial_consistency_forward(
            &map.refined_map,
            &selected,
            branches,
            &mut d_map_s,
            grads.is_some(),
        )?;
        let losses = total_loss(
            LossParts {
                global_alignment: l_g,
                neighborhood_consensus: consensus.loss,
                spatial_consistency: l_s,
            },
            config.gamma,
            config.theta,
            config.beta,
        );

        if let Some(g) = grads.as_deref_mut() {
            let (gamma, theta) = (config.gamma, config.theta);
            let mut d_rot: Matrix3<f64> = consensus.d_rotation * gamma;
            let mut d_t: Vector3<f64> = consensus.d_translation * gamma;
            for (dm, p) in d_moved.iter().zip(current.points()) {
                d_rot += dm * p.transpose();
                d_t += dm;
            }
            let (mut d_pseudo, d_weights) =
                weighted_svd_backward(&svd, current.points(), &pseudo, &d_rot, &d_t);
            for (a, b) in d_pseudo.iter_mut().zip(&consensus.d_targets) {
                *a += b * gamma;
            }
            let d_from_head = match &head {
                HeadState::Graph(edges, cache) => {
                    graph_head_backward(edges, &index_p, params, cache, &d_weights, g)
                }
                #[cfg(feature = "ablation")]
                HeadState::Concat(cache) => crate::inlier::concat::backward(
                    &current, &pseudo, params, cache, &d_weights, g,
                ),
            };
            for (a, b) in d_pseudo.iter_mut().zip(&d_from_head) {
                *a += b;
            }
            let mut d_map = pseudo_targets_backward(&d_pseudo, target);
            for (a, b) in d_map.as_mut_slice().iter_mut().zip(d_map_s.as_slice()) {
                *a += theta * b;
            }
            let (d_fp, d_fq) =
                map.backward(&feat_p, &feat_q, &index_p, &index_q, &d_map, config.refine);
            features_backward(&index_p, params, &cache_p, &d_fp, g);
            for (a, b) in d_feat_q.as_mut_slice().iter_mut().zip(d_fq.as_slice()) {
                *a += b;
            }
        }

        cumulative = increment.compose(&start);
        per_iteration.push(IterationRecord {
            increment,
            pseudo_targets: pseudo,
            weights,
            losses,
        });
    }
    if let Some(g) = grads {
        features_backward(&index_q, params, &cache_q, &d_feat_q, g);
    }

    let transform = if options.starts.is_some() {
        cumulative
    } else {
        per_iteration
            .iter()
            .fold(RigidTransform::identity(), |acc, r| r.increment.compose(&acc))
    };
    Ok(PipelineRun {
        result: RegistrationResult {
            transform,
            per_iteration,
            iterations: config.iterations,
        },
        starts,
    })
}

/// Loss of one pair summed over iterations and its truncated gradient.
pub(crate) fn loss_and_gradient(
    source: &PointCloud,
    target: &PointCloud,
    params: &NetworkParams,
    config: &RegistrationConfig,
) -> Result<(RegistrationResult, NetworkParams)> {
    let mut grads = params.zeros_like();
    let run = run_pipeline(
        source,
        target,
        params,
        config,
        &RunOptions::default(),
        &mut Branches::record(),
        Some(&mut grads),
    )?;
    Ok((run.result, grads))
}
