//! Point cloud registration by neighborhood consensus.
//!
//! Descriptors from a dynamic-graph network give a soft point map, which is
//! sharpened by agreement among neighbors, turned into pseudo targets, scored
//! for inlier confidence and solved in closed form with a weighted SVD.

#![no_std]

extern crate alloc;

mod branch;
mod error;
mod math;
mod matrix;

pub mod cloud;
pub mod datagen;
pub mod features;
pub mod inlier;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod solver;
pub mod train;

pub use cloud::{
    apply_transform, build_knn_index, compose, invert, NeighborIndex, Point, PointCloud,
    RigidTransform,
};
pub use error::{Error, Result};
pub use features::{extract_features, FeatureMatrix};
pub use inlier::{build_edge_sets, evaluate_inliers, select_inliers, CorrespondenceSet, EdgeSet};
pub use matching::{neighborhood_scores, pointwise_map, predict_pseudo_targets, refine_map, MatchingMap};
pub use matrix::RowMatrix;
pub use params::{init_params, InlierHead, NetConfig, NetworkParams, Tensor};
pub use solver::{icp_baseline, weighted_svd};
pub use datagen::{generate_pair, sample_shape, LabeledPair, NoisePreset, PairSpec, ShapeKind};
pub use losses::{total_loss, LossBreakdown, LossParts};
pub use metrics::{evaluate, mie_metrics, roc_auc, MetricReport};
pub use pipeline::{register, IterationRecord, RegistrationConfig, RegistrationResult};
pub use train::{grad_check, train, train_from, GradCheckReport, GradMode, TrainConfig, TrainHistory};
