//! Channel-recalibration blocks.
//!
//! Both blocks compute a per-channel gate and multiply it into a feature map.
//! The squeeze-and-excitation baseline derives the gate from the feature map
//! itself (global average pool). The sentence attention block derives it from
//! the joint question/answer embedding:
//!
//! ```text
//! gate = softmax(fc2(relu(layer_norm(fc1(qa)))))
//! out[b, c, :, :] = gate[b, c] * r[b, c, :, :]
//! ```
//!
//! Every step of the progression between the two (gate source, normalization,
//! gate function, bottleneck vs. expansion) is an independent switch in
//! [`SabConfig`].

use serde::{Deserialize, Serialize};

use super::{
    global_avg_pool, join, layer_norm, linear, softmax, Init, LayerNormParams, LinearLayer,
    Parameters,
};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Where the gate is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSource {
    /// Pooled feature map (squeeze-and-excitation).
    #[serde(rename = "self")]
    SelfPooled,
    /// Question/answer embedding.
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    LayerNorm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Softmax,
    Sigmoid,
}

/// Shape and variant switches for one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SabConfig {
    /// Sentence embedding width `E`; the joint embedding is `2E`.
    pub embed_size: usize,
    /// Gated feature channels `C`.
    pub channels: usize,
    pub source: AttentionSource,
    pub normalization: Normalization,
    pub gate: Gate,
    /// Widen the hidden layer by `expansion_factor` instead of shrinking it
    /// by `reduction`.
    pub expansion: bool,
    pub expansion_factor: usize,
    pub reduction: usize,
}

impl SabConfig {
    /// Full sentence attention block: cross-attention, layer norm, softmax,
    /// hidden width `2 · 2E`.
    pub fn sentence(embed_size: usize, channels: usize) -> Self {
        SabConfig {
            embed_size,
            channels,
            source: AttentionSource::Cross,
            normalization: Normalization::LayerNorm,
            gate: Gate::Softmax,
            expansion: true,
            expansion_factor: 2,
            reduction: 4,
        }
    }

    /// Plain squeeze-and-excitation with reduction 4.
    pub fn squeeze_excitation(channels: usize) -> Self {
        SabConfig {
            embed_size: 0,
            channels,
            source: AttentionSource::SelfPooled,
            normalization: Normalization::None,
            gate: Gate::Sigmoid,
            expansion: false,
            expansion_factor: 2,
            reduction: 4,
        }
    }

    pub fn input_width(&self) -> usize {
        match self.source {
            AttentionSource::SelfPooled => self.channels,
            AttentionSource::Cross => 2 * self.embed_size,
        }
    }

    pub fn hidden_width(&self) -> usize {
        let input = self.input_width();
        if self.expansion {
            self.expansion_factor * input
        } else {
            input.div_ceil(self.reduction.max(1)).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.expansion_factor == 0 || self.reduction == 0 {
            return Err(Error::Config(format!("degenerate attention block {self:?}")));
        }
        if self.source == AttentionSource::Cross && self.embed_size == 0 {
            return Err(Error::Config("cross-attention needs embed_size > 0".into()));
        }
        if self.normalization == Normalization::LayerNorm && self.hidden_width() < 2 {
            return Err(Error::Config("layer norm needs hidden width >= 2".into()));
        }
        Ok(())
    }
}

/// `fc1 -> [layer norm] -> relu -> fc2 -> gate`.
#[derive(Debug, Clone)]
pub struct SabParams {
    pub fc1: LinearLayer,
    pub ln: Option<LayerNormParams>,
    pub fc2: LinearLayer,
}

impl SabParams {
    pub fn new(init: &Init, name: &str, cfg: &SabConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_width();
        Ok(SabParams {
            fc1: LinearLayer::new(init, &join(name, "fc1"), cfg.input_width(), hidden)?,
            ln: match cfg.normalization {
                Normalization::LayerNorm => Some(LayerNormParams::new(hidden)?),
                Normalization::None => None,
            },
            fc2: LinearLayer::new(init, &join(name, "fc2"), hidden, cfg.channels)?,
        })
    }
}

impl Parameters for SabParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        if let Some(ln) = &self.ln {
            ln.visit(&join(prefix, "ln"), f);
        }
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        if let Some(ln) = &mut self.ln {
            ln.visit_mut(&join(prefix, "ln"), f);
        }
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Gate vector `[B × C]` for the feature map `r` (and `qa` when cross).
pub fn gate_vector(params: &SabParams, qa: &Tensor, r: &Tensor, cfg: &SabConfig) -> Result<Tensor> {
    if r.ndim() != 4 || r.shape()[1] != cfg.channels {
        return Err(Error::shape("sab_forward", r.shape(), &[cfg.channels]));
    }
    let source = match cfg.source {
        AttentionSource::SelfPooled => global_avg_pool(r)?,
        AttentionSource::Cross => {
            if qa.ndim() != 2 || qa.shape()[1] != 2 * cfg.embed_size || qa.shape()[0] != r.shape()[0] {
                return Err(Error::shape("sab_forward", qa.shape(), &[r.shape()[0], 2 * cfg.embed_size]));
            }
            qa.clone()
        }
    };
    let mut h = linear(&params.fc1, &source)?;
    if let Some(ln) = &params.ln {
        h = layer_norm(ln, &h)?;
    }
    let logits = linear(&params.fc2, &ops::relu(&h)?)?;
    match cfg.gate {
        Gate::Softmax => softmax(&logits),
        Gate::Sigmoid => ops::sigmoid(&logits),
    }
}

/// Recalibrates `r_i[B × C × H × W]` channel-wise with the gate computed from
/// `qa[B × 2E]` (ignored for self-attention configs).
pub fn sab_forward(params: &SabParams, qa: &Tensor, r_i: &Tensor, cfg: &SabConfig) -> Result<Tensor> {
    let gate = gate_vector(params, qa, r_i, cfg)?;
    ops::channel_scale(r_i, &gate)
}

/// Squeeze-and-excitation: `sigmoid(fc(relu(fc(avg_pool(x))))) * x`.
pub fn se_block(x: &Tensor, params: &SabParams) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::shape("se_block", x.shape(), &[0, 0, 0, 0]));
    }
    let cfg = SabConfig::squeeze_excitation(x.shape()[1]);
    sab_forward(params, x, x, &cfg)
}
