//! Unsupervised training with Adam, and a finite-difference check of the
//! analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branch::Branches;
use crate::cloud::{PointCloud, RigidTransform};
use crate::datagen::LabeledPair;
use crate::error::{invalid, Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, MetricReport};
use crate::params::{init_params, NetConfig, NetworkParams};
use crate::pipeline::{register, run_pipeline, RegistrationConfig, RunOptions};
use crate::math::powi;

/// Step used by every central difference.
pub const FD_STEP: f64 = 1e-4;
/// Floor of the denominator of the relative gradient error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Where the training gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    #[default]
    Analytic,
    /// Central differences over every parameter; slow, for verification.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub registration: RegistrationConfig,
    pub net: NetConfig,
    /// Seeds both the initial weights and the pair order.
    pub seed: u64,
    pub grad_mode: GradMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            milestones: vec![25],
            lr_decay: 0.7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            registration: RegistrationConfig::default(),
            net: NetConfig::default(),
            seed: 0,
            grad_mode: GradMode::Analytic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be positive"));
        }
        // zero is allowed so a run can be checked for side effects
        if !(0.0..1.0).contains(&self.learning_rate) {
            return Err(invalid!("learning rate {} outside [0, 1)", self.learning_rate));
        }
        if !(self.lr_decay > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid!("invalid optimizer settings"));
        }
        self.registration.validate()?;
        self.net.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * powi(self.lr_decay, passed as i32)
    }
}

/// One epoch of [`TrainHistory`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over trained pairs of the loss summed over pipeline iterations.
    pub loss: LossBreakdown,
    /// Mean metrics over the holdout, when one was given.
    pub holdout: Option<MetricReport>,
    /// Pairs whose solve was degenerate and contributed no gradient.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Trains from weights initialized with `config.seed`.
pub fn train(
    dataset: &[LabeledPair],
    holdout: &[LabeledPair],
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    let params = init_params(config.seed, &config.net)?;
    train_from(params, dataset, holdout, config)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: NetworkParams,
    dataset: &[LabeledPair],
    holdout: &[LabeledPair],
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("empty training set"));
    }
    if params.config() != &config.net {
        return Err(invalid!("parameters were built for a different architecture"));
    }
    let mut adam = Adam::new(&params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0de7);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown {
            gamma: config.registration.gamma,
            theta: config.registration.theta,
            beta: config.registration.beta,
            ..Default::default()
        };
        let (mut used, mut skipped) = (0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            // accumulate in pair-index order so the sum does not depend on the shuffle
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let mut grads = params.zeros_like();
            let mut count = 0usize;
            for &i in &batch {
                let pair = &dataset[i];
                let outcome = pair_gradient(&params, &pair.source, &pair.target, config);
                let (result_losses, g) = match outcome {
                    Ok(v) => v,
                    Err(Error::DegenerateConfiguration(_)) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                for (it, l) in result_losses.iter().enumerate() {
                    if !l.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            pair: i,
                            iteration: it,
                            detail: format!(
                                "{l:?}; source centroid {:?}, target centroid {:?}, {} and {} points",
                                pair.source.centroid().as_slice(),
                                pair.target.centroid().as_slice(),
                                pair.source.len(),
                                pair.target.len()
                            ),
                        });
                    }
                    sum.accumulate(l);
                }
                grads.add_scaled(&g, 1.0);
                count += 1;
            }
            if count == 0 {
                continue;
            }
            used += count;
            adam.step(&mut params, &grads, 1.0 / count as f64, lr);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    pair: batch[0],
                    iteration: 0,
                    detail: String::from("parameters became non-finite after an update"),
                });
            }
        }
        let loss = if used > 0 { sum.scaled(1.0 / used as f64) } else { sum };
        let holdout_report = if holdout.is_empty() {
            None
        } else {
            Some(mean_report(&params, holdout, &config.registration))
        };
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
            holdout: holdout_report,
            skipped,
        });
    }
    Ok((params, history))
}

/// Per-iteration losses and the summed-loss gradient of one pair.
fn pair_gradient(
    params: &NetworkParams,
    source: &PointCloud,
    target: &PointCloud,
    config: &TrainConfig,
) -> Result<(Vec<LossBreakdown>, NetworkParams)> {
    match config.grad_mode {
        GradMode::Analytic => {
            let (result, grads) =
                crate::pipeline::loss_and_gradient(source, target, params, &config.registration)?;
            Ok((result.per_iteration.iter().map(|r| r.losses).collect(), grads))
        }
        GradMode::FiniteDifference => {
            let fd = numeric_gradient(params, source, target, &config.registration, false)?;
            Ok((fd.losses, fd.gradient))
        }
    }
}

/// Mean metrics of registering every holdout pair; failed solves count as a
/// registration with the identity.
pub fn mean_report(params: &NetworkParams, pairs: &[LabeledPair], config: &RegistrationConfig) -> MetricReport {
    let mut acc = MetricReport::default();
    for pair in pairs {
        let pred = register(&pair.source, &pair.target, params, config)
            .map(|r| r.transform)
            .unwrap_or_else(|_| RigidTransform::identity());
        let m = evaluate(&pred, &pair.gt, &pair.source, &pair.target);
        acc.mae_r += m.mae_r;
        acc.mae_t += m.mae_t;
        acc.mie_r += m.mie_r;
        acc.mie_t += m.mie_t;
        acc.chamfer += m.chamfer;
        acc.gimbal_lock |= m.gimbal_lock;
    }
    let n = pairs.len().max(1) as f64;
    MetricReport {
        mae_r: acc.mae_r / n,
        mae_t: acc.mae_t / n,
        mie_r: acc.mie_r / n,
        mie_t: acc.mie_t / n,
        chamfer: acc.chamfer / n,
        gimbal_lock: acc.gimbal_lock,
    }
}

struct Adam {
    m: NetworkParams,
    v: NetworkParams,
    t: i32,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &NetworkParams, config: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            b1: config.adam_beta1,
            b2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, scale: f64, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - powi(self.b1, self.t);
        let c2 = 1.0 - powi(self.b2, self.t);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
            for i in 0..p.values.len() {
                let gi = g.values[i] * scale;
                m.values[i] = self.b1 * m.values[i] + (1.0 - self.b1) * gi;
                v.values[i] = self.b2 * v.values[i] + (1.0 - self.b2) * gi * gi;
                let mh = m.values[i] / c1;
                let vh = v.values[i] / c2;
                p.values[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Central-difference gradient of the summed pipeline loss with every
/// iteration's input transform held at its unperturbed value.
pub(crate) struct NumericGradient {
    pub gradient: NetworkParams,
    pub losses: Vec<LossBreakdown>,
    /// Coordinates whose perturbation crossed a kink and was re-evaluated on
    /// the unperturbed branch.
    pub replayed: usize,
}

pub(crate) fn numeric_gradient(
    params: &NetworkParams,
    source: &PointCloud,
    target: &PointCloud,
    config: &RegistrationConfig,
    check_conditioning: bool,
) -> Result<NumericGradient> {
    let mut branches = Branches::record();
    let base = run_pipeline(
        source,
        target,
        params,
        config,
        &RunOptions { starts: None, check_conditioning },
        &mut branches,
        None,
    )?;
    let log = branches.into_log();
    let starts = base.starts;
    let fixed = RunOptions { starts: Some(&starts), check_conditioning: false };
    let eval = |p: &NetworkParams, replayed: &mut usize| -> Result<f64> {
        let mut b = Branches::record();
        let run = run_pipeline(source, target, p, config, &fixed, &mut b, None);
        if let Ok(run) = &run {
            if b.log() == log.as_slice() {
                return Ok(run.result.total_loss());
            }
        }
        *replayed += 1;
        let mut b = Branches::replay(log.clone());
        Ok(run_pipeline(source, target, p, config, &fixed, &mut b, None)?.result.total_loss())
    };
    let mut gradient = params.zeros_like();
    let mut probe = params.clone();
    let mut replayed = 0;
    for t in 0..params.tensors().len() {
        for i in 0..params.tensors()[t].values.len() {
            let x = params.tensors()[t].values[i];
            let mut hits = 0;
            probe.tensors_mut()[t].values[i] = x + FD_STEP;
            let plus = eval(&probe, &mut hits)?;
            probe.tensors_mut()[t].values[i] = x - FD_STEP;
            let minus = eval(&probe, &mut hits)?;
            probe.tensors_mut()[t].values[i] = x;
            if hits > 0 {
                replayed += 1;
            }
            gradient.tensors_mut()[t].values[i] = (plus - minus) / (2.0 * FD_STEP);
        }
    }
    Ok(NumericGradient {
        gradient,
        losses: base.result.per_iteration.iter().map(|r| r.losses).collect(),
        replayed,
    })
}

/// Agreement of one tensor's analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `max|a - f| / max(max|a|, max|f|, 1e-8)` over the tensor.
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    /// Coordinates evaluated on the unperturbed branch because a step of
    /// `FD_STEP` crossed a kink.
    pub replayed_coordinates: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient of the summed pipeline loss with central
/// differences. Fails with [`Error::IllConditioned`] when the instance has
/// nearly repeated singular values; draw another instance in that case.
pub fn grad_check(
    params: &NetworkParams,
    pair: &LabeledPair,
    config: &RegistrationConfig,
) -> Result<GradCheckReport> {
    if pair.source.len() > 64 || pair.target.len() > 64 {
        return Err(invalid!("gradient check is meant for clouds of at most 64 points"));
    }
    let numeric = numeric_gradient(params, &pair.source, &pair.target, config, true)?;
    let (_, analytic) =
        crate::pipeline::loss_and_gradient(&pair.source, &pair.target, params, config)?;
    let mut tensors = Vec::new();
    let mut worst: f64 = 0.0;
    for (a, f) in analytic.tensors().iter().zip(numeric.gradient.tensors()) {
        let max_a = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_f = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .values
            .iter()
            .zip(&f.values)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let rel = diff / max_a.max(max_f).max(REL_ERROR_FLOOR);
        worst = worst.max(rel);
        tensors.push(TensorCheck {
            name: a.name.clone(),
            max_rel_error: rel,
            max_abs_analytic: max_a,
            max_abs_numeric: max_f,
        });
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_error: worst,
        replayed_coordinates: numeric.replayed,
        coordinates: params.num_values(),
    })
}
