//! Network configuration and the named parameter tensors it owns.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
#[allow(unused_imports)] // float math is inherent in core on recent toolchains
use num_traits::Float;

/// Which module scores the inlier confidence of each pseudo correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InlierHead {
    /// Graph-structure difference between source and pseudo-target neighborhoods.
    #[default]
    GraphDifference,
    /// Small MLP over the concatenated coordinates of each matched pair.
    #[cfg(feature = "ablation")]
    #[doc(hidden)]
    ConcatMlp,
}

/// Architecture of the descriptor network and the inlier evaluator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Output width of every EdgeConv layer; the last entry is the descriptor dimension.
    pub feature_widths: Vec<usize>,
    /// Whether EdgeConv inputs carry the center point alongside the edge vector.
    pub center_channel: bool,
    /// Channels of the lifted edge features inside the inlier evaluator.
    pub edge_channels: usize,
    /// Kernel width of the convolution along the neighbor axis (1 or 3).
    pub kernel_width: usize,
    pub inlier_head: InlierHead,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            feature_widths: vec![32, 32],
            center_channel: true,
            edge_channels: 16,
            kernel_width: 3,
            inlier_head: InlierHead::GraphDifference,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_widths.is_empty() || self.feature_widths.contains(&0) {
            return Err(invalid!("feature widths must be non-empty and positive"));
        }
        if self.edge_channels == 0 {
            return Err(invalid!("edge_channels must be positive"));
        }
        if !matches!(self.kernel_width, 1 | 3) {
            return Err(invalid!("kernel width must be 1 or 3, got {}", self.kernel_width));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.feature_widths.last().expect("validated")
    }

    /// Ordered `(name, shape)` list of every tensor the architecture declares.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = 3;
        for (l, &w) in self.feature_widths.iter().enumerate() {
            let edge = if self.center_channel { 2 * fan_in } else { fan_in };
            out.push((format!("feat.{l}.weight"), vec![w, edge]));
            out.push((format!("feat.{l}.bias"), vec![w]));
            fan_in = w;
        }
        let c = self.edge_channels;
        match self.inlier_head {
            InlierHead::GraphDifference => {
                out.push(("inlier.v.lift.weight".into(), vec![c, 3]));
                out.push(("inlier.v.lift.bias".into(), vec![c]));
                out.push(("inlier.v.conv.weight".into(), vec![c, c, self.kernel_width]));
                out.push(("inlier.v.conv.bias".into(), vec![c]));
                out.push(("inlier.u.weight".into(), vec![1, c]));
                out.push(("inlier.g.0.weight".into(), vec![c, c]));
                out.push(("inlier.g.1.weight".into(), vec![1, c]));
            }
            #[cfg(feature = "ablation")]
            InlierHead::ConcatMlp => {
                out.push(("inlier.mlp.0.weight".into(), vec![c, 6]));
                out.push(("inlier.mlp.0.bias".into(), vec![c]));
                out.push(("inlier.mlp.1.weight".into(), vec![1, c]));
                out.push(("inlier.mlp.1.bias".into(), vec![1]));
            }
        }
        out
    }
}

/// A named, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Every learnable tensor of the pipeline, in the canonical order given by
/// [`NetConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetConfig,
    tensors: Vec<Tensor>,
}

/// Positions of the inlier-evaluator tensors inside `NetworkParams::tensors`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadSlots {
    pub first: usize,
}

impl NetworkParams {
    /// Assembles parameters from explicit tensors, checking names and shapes
    /// against the architecture.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(invalid!(
                "architecture declares {} tensors, got {}",
                layout.len(),
                tensors.len()
            ));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(invalid!(
                    "expected tensor {name} with shape {shape:?}, found {} with shape {:?}",
                    t.name,
                    t.shape
                ));
            }
            if t.values.len() != shape.iter().product::<usize>() {
                return Err(invalid!("tensor {name} has {} values", t.values.len()));
            }
            if !t.values.iter().all(|v| v.is_finite()) {
                return Err(invalid!("tensor {name} has non-finite entries"));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: &NetConfig) -> Self {
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| Tensor::zeros(name, shape))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    #[inline]
    pub(crate) fn values(&self, slot: usize) -> &[f64] {
        &self.tensors[slot].values
    }

    #[inline]
    pub(crate) fn values_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.tensors[slot].values
    }

    pub(crate) fn head_slots(&self) -> HeadSlots {
        HeadSlots {
            first: 2 * self.config.feature_widths.len(),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases; a pure function of `seed`.
pub fn init_params(seed: u64, config: &NetConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(config);
    for t in params.tensors.iter_mut() {
        if t.name.ends_with(".bias") {
            continue;
        }
        let (fan_out, fan_in) = match t.shape.as_slice() {
            [o, i] => (*o, *i),
            [o, i, taps] => (*o * taps, *i * taps),
            _ => unreachable!("weights are matrices or conv kernels"),
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in t.values.iter_mut() {
            *v = rng.random_range(-s..s);
        }
    }
    Ok(params)
}
