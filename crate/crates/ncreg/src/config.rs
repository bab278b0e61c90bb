//! TOML run configuration. Every default is read from the core types, so
//! there is a single source of truth.

use std::path::Path;

use ncreg_core::{GradMode, NetConfig, NoisePreset, RegistrationConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_text, CliError, CliResult};
use crate::weights::{head_from_name, head_name};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub registration: RegistrationSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub k: usize,
    /// Absent means half the source size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<usize>,
    pub iterations: usize,
    pub refine: bool,
    pub huber_on_squared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// The last width is the descriptor dimension d.
    pub feature_widths: Vec<usize>,
    pub center_channel: bool,
    pub edge_channels: usize,
    pub kernel_width: usize,
    pub inlier_head: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    /// `analytic` or `finite-difference`.
    pub grad_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `desk` or `paper`.
    pub noise: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_core(&TrainConfig::default(), NoisePreset::default())
    }
}

impl Default for RegistrationSection {
    fn default() -> Self {
        RunConfig::default().registration
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        RunConfig::default().network
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        RunConfig::default().training
    }
}

impl Default for DataSection {
    fn default() -> Self {
        RunConfig::default().data
    }
}

pub fn grad_mode_name(mode: GradMode) -> &'static str {
    match mode {
        GradMode::Analytic => "analytic",
        GradMode::FiniteDifference => "finite-difference",
    }
}

pub fn noise_name(preset: NoisePreset) -> &'static str {
    match preset {
        NoisePreset::Desk => "desk",
        NoisePreset::Paper => "paper",
    }
}

pub fn noise_from_name(name: &str) -> Option<NoisePreset> {
    match name {
        "desk" => Some(NoisePreset::Desk),
        "paper" => Some(NoisePreset::Paper),
        _ => None,
    }
}

/// One-line rendering of a TOML error.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().replace('\n', "; ");
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {msg}")
        }
        None => msg,
    }
}

impl RunConfig {
    pub fn from_core(train: &TrainConfig, noise: NoisePreset) -> Self {
        let r = &train.registration;
        let n = &train.net;
        Self {
            registration: RegistrationSection {
                alpha: r.alpha,
                beta: r.beta,
                gamma: r.gamma,
                theta: r.theta,
                k: r.k,
                k_prime: r.k_prime,
                iterations: r.iterations,
                refine: r.refine,
                huber_on_squared: r.huber_on_squared,
            },
            network: NetworkSection {
                feature_widths: n.feature_widths.clone(),
                center_channel: n.center_channel,
                edge_channels: n.edge_channels,
                kernel_width: n.kernel_width,
                inlier_head: head_name(n.inlier_head).into(),
            },
            training: TrainingSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                milestones: train.milestones.clone(),
                lr_decay: train.lr_decay,
                seed: train.seed,
                grad_mode: grad_mode_name(train.grad_mode).into(),
            },
            data: DataSection {
                noise: noise_name(noise).into(),
            },
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(toml_error(text, &e)))?;
        let as_config = |e: CliError| match e {
            CliError::Core(c) => CliError::Config(c.to_string()),
            other => other,
        };
        cfg.train_config().map_err(as_config)?;
        cfg.noise()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&read_text(path)?).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn registration(&self) -> CliResult<RegistrationConfig> {
        let r = &self.registration;
        let cfg = RegistrationConfig {
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            theta: r.theta,
            k: r.k,
            k_prime: r.k_prime,
            iterations: r.iterations,
            refine: r.refine,
            huber_on_squared: r.huber_on_squared,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn net(&self) -> CliResult<NetConfig> {
        let n = &self.network;
        let inlier_head = head_from_name(&n.inlier_head)
            .ok_or_else(|| CliError::Config(format!("unknown inlier head `{}`", n.inlier_head)))?;
        let cfg = NetConfig {
            feature_widths: n.feature_widths.clone(),
            center_channel: n.center_channel,
            edge_channels: n.edge_channels,
            kernel_width: n.kernel_width,
            inlier_head,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.training;
        let grad_mode = match t.grad_mode.as_str() {
            "analytic" => GradMode::Analytic,
            "finite-difference" => GradMode::FiniteDifference,
            other => return Err(CliError::Config(format!("unknown grad mode `{other}`"))),
        };
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            milestones: t.milestones.clone(),
            lr_decay: t.lr_decay,
            seed: t.seed,
            grad_mode,
            registration: self.registration()?,
            net: self.net()?,
            ..defaults
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise(&self) -> CliResult<NoisePreset> {
        noise_from_name(&self.data.noise)
            .ok_or_else(|| CliError::Config(format!("unknown noise preset `{}`", self.data.noise)))
    }
}
