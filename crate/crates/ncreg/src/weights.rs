//! Weights files: the architecture plus an ordered list of named tensors,
//! stored as JSON with shortest round-trip number formatting.

use std::path::Path;

use ncreg_core::{InlierHead, NetConfig, NetworkParams, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{read_text, write_text, CliError, CliResult};

const FORMAT_TAG: &str = "ncreg-weights/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    format: String,
    architecture: ArchitectureDoc,
    tensors: Vec<TensorDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureDoc {
    feature_widths: Vec<usize>,
    center_channel: bool,
    edge_channels: usize,
    kernel_width: usize,
    inlier_head: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub(crate) fn head_name(head: InlierHead) -> &'static str {
    match head {
        InlierHead::GraphDifference => "graph-difference",
        #[allow(unreachable_patterns)]
        _ => "concat-mlp",
    }
}

pub(crate) fn head_from_name(name: &str) -> Option<InlierHead> {
    match name {
        "graph-difference" => Some(InlierHead::GraphDifference),
        #[cfg(feature = "ablation")]
        "concat-mlp" => Some(InlierHead::ConcatMlp),
        _ => None,
    }
}

pub fn weights_to_string(params: &NetworkParams) -> CliResult<String> {
    if !params.all_finite() {
        return Err(CliError::Config("refusing to save non-finite weights".into()));
    }
    let cfg = params.config();
    let doc = WeightsDoc {
        format: FORMAT_TAG.into(),
        architecture: ArchitectureDoc {
            feature_widths: cfg.feature_widths.clone(),
            center_channel: cfg.center_channel,
            edge_channels: cfg.edge_channels,
            kernel_width: cfg.kernel_width,
            inlier_head: head_name(cfg.inlier_head).into(),
        },
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorDoc {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("weights serialize");
    text.push('\n');
    Ok(text)
}

/// `origin` labels error messages.
pub fn weights_from_str(text: &str, origin: &Path) -> CliResult<NetworkParams> {
    let doc: WeightsDoc = serde_json::from_str(text)
        .map_err(|e| CliError::parse(origin, e.line(), e.to_string()))?;
    if doc.format != FORMAT_TAG {
        return Err(CliError::parse(
            origin,
            0,
            format!("unknown weights format `{}`", doc.format),
        ));
    }
    let a = doc.architecture;
    let inlier_head = head_from_name(&a.inlier_head).ok_or_else(|| {
        CliError::parse(origin, 0, format!("unknown inlier head `{}`", a.inlier_head))
    })?;
    let config = NetConfig {
        feature_widths: a.feature_widths,
        center_channel: a.center_channel,
        edge_channels: a.edge_channels,
        kernel_width: a.kernel_width,
        inlier_head,
    };
    let tensors = doc
        .tensors
        .into_iter()
        .map(|t| Tensor {
            name: t.name,
            shape: t.shape,
            values: t.values,
        })
        .collect();
    NetworkParams::from_tensors(config, tensors)
        .map_err(|e| CliError::parse(origin, 0, e.to_string()))
}

pub fn save_weights(params: &NetworkParams, path: &Path) -> CliResult<()> {
    write_text(path, &weights_to_string(params)?)
}

/// Loads trained weights. A missing file is reported as untrained weights;
/// there is no fallback to a random initialization.
pub fn load_weights(path: &Path) -> CliResult<NetworkParams> {
    if !path.is_file() {
        return Err(CliError::UntrainedWeights {
            path: path.to_path_buf(),
            reason: "no weights file here; run `ncreg train` first".into(),
        });
    }
    weights_from_str(&read_text(path)?, path)
}
