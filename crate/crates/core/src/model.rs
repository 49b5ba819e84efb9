//! The full grounding network.
//!
//! ```text
//! image ──► backbone ──► pyramid levels (1/4, 1/8, 1/16, 1/32)
//! question, answer ──► text encoder ──► qa [B × 2E]
//! level_i ──► attention block i (gated by qa) ──► attended_i
//! coarsest attended ──► (1×1 conv, 2× upsample, + next finer) ... ──► fused (finest scale)
//! fused ──► 1×1 head conv (2 channels) ──► upsample to input ──► logits ──► argmax mask
//! ```

use serde::{Deserialize, Serialize};

use crate::backbone::{level_stride, Backbone, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::attention::gate_vector;
use crate::nn::{
    bilinear_upsample2x, join, upsample_pow2, AttentionSource, Conv2d, Gate, Init, Normalization,
    Parameters, SabConfig, SabParams,
};
use crate::tensor::{ops, Tensor};
use crate::text::{TextConfig, TextEncoder};

/// Architecture switches. Every field has the documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub stem_channels: usize,
    /// Backbone output channels per level, finest first.
    pub channels: Vec<usize>,
    /// Pyramid scales fed through attention and fusion, as stride
    /// denominators. Must be a contiguous run that includes 32.
    pub scales: Vec<usize>,
    pub attention: AttentionSource,
    pub normalization: Normalization,
    pub gate: Gate,
    pub expansion: bool,
    pub expansion_factor: usize,
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: TextConfig::default(),
            stem_channels: 16,
            channels: vec![16, 32, 64, 128],
            scales: vec![32, 16, 8, 4],
            attention: AttentionSource::Cross,
            normalization: Normalization::LayerNorm,
            gate: Gate::Softmax,
            expansion: true,
            expansion_factor: 2,
            reduction: 4,
        }
    }
}

impl ModelConfig {
    /// Pyramid level indices in use, finest first.
    pub fn active_levels(&self) -> Result<Vec<usize>> {
        let n = self.channels.len();
        let mut levels = Vec::with_capacity(self.scales.len());
        for &s in &self.scales {
            let level = (0..n)
                .find(|&l| level_stride(l) == s)
                .ok_or_else(|| Error::Config(format!("scale 1/{s} is not a pyramid level")))?;
            if levels.contains(&level) {
                return Err(Error::Config(format!("scale 1/{s} listed twice")));
            }
            levels.push(level);
        }
        levels.sort_unstable();
        let contiguous = levels.windows(2).all(|w| w[1] == w[0] + 1);
        if levels.is_empty() || !contiguous || *levels.last().unwrap() != n - 1 {
            return Err(Error::Config(format!(
                "scales {:?} must be a contiguous run ending at the coarsest level 1/{}",
                self.scales,
                level_stride(n - 1)
            )));
        }
        Ok(levels)
    }

    pub fn block_config(&self, channels: usize) -> SabConfig {
        SabConfig {
            embed_size: self.text.embed_size,
            channels,
            source: self.attention,
            normalization: self.normalization,
            gate: self.gate,
            expansion: self.expansion,
            expansion_factor: self.expansion_factor,
            reduction: self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "channels {:?} must be strictly increasing",
                self.channels
            )));
        }
        for &c in &self.channels {
            self.block_config(c).validate()?;
        }
        self.active_levels().map(|_| ())
    }
}

/// Logits at input resolution plus their argmax.
#[derive(Debug, Clone)]
pub struct GroundingOutput {
    /// `[B × 2 × H × W]`; channel 1 is the answer region.
    pub logits: Tensor,
    /// `[B × H × W]`, values in {0, 1}.
    pub mask: Tensor,
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pyramid: FeaturePyramid,
    pub qa: Tensor,
    /// One gate `[B × C_i]` per active level, finest first.
    pub gates: Vec<Tensor>,
    pub fused: Tensor,
    pub output: GroundingOutput,
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub text: TextEncoder,
    /// One block per active level, finest first.
    pub attention: Vec<SabParams>,
    /// `lateral[j]` maps active level `j + 1` onto the channels of level `j`.
    pub lateral: Vec<Conv2d>,
    pub head: Conv2d,
    levels: Vec<usize>,
}

impl GroundingModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = Init::new(seed);
        let levels = cfg.active_levels()?;
        let backbone = Backbone::new(&init, cfg.stem_channels, &cfg.channels)?;
        let text = TextEncoder::new(cfg.text)?;
        let attention = levels
            .iter()
            .map(|&l| {
                SabParams::new(
                    &init,
                    &format!("attention.{l}"),
                    &cfg.block_config(cfg.channels[l]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // Each gated level arrives scaled by about 1 / gate_gain; lateral
        // convs and the head are initialised to undo that.
        let gain = |l: usize| gate_gain(cfg.gate, cfg.channels[l]);
        let lateral = levels
            .windows(2)
            .map(|w| {
                let conv = Conv2d::new(
                    &init,
                    &format!("fusion.lateral{}", w[0]),
                    cfg.channels[w[1]],
                    cfg.channels[w[0]],
                    1,
                    1,
                    0,
                    false,
                )?;
                conv.scaled(gain(w[1]) / gain(w[0]))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(&init, "fusion.head", cfg.channels[levels[0]], 2, 1, 1, 0, true)?.scaled(gain(levels[0]))?;
        Ok(GroundingModel {
            cfg: cfg.clone(),
            backbone,
            text,
            attention,
            lateral,
            head,
            levels,
        })
    }

    /// Active pyramid level indices, finest first.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn input_multiple(&self) -> usize {
        self.backbone.input_multiple()
    }

    pub fn forward(&self, image: &Tensor, pairs: &[(&str, &str)]) -> Result<GroundingOutput> {
        Ok(self.forward_trace(image, pairs)?.output)
    }

    pub fn forward_trace(&self, image: &Tensor, pairs: &[(&str, &str)]) -> Result<ForwardTrace> {
        if image.ndim() != 4 || pairs.len() != image.shape()[0] {
            return Err(Error::contract(
                "model_forward",
                format!(
                    "{} question/answer pairs for image batch {:?}",
                    pairs.len(),
                    image.shape()
                ),
            ));
        }
        let pyramid = self.backbone.forward(&center(image)?)?;
        let qa = self.text.encode(pairs)?;
        let mut gates = Vec::with_capacity(self.levels.len());
        let mut attended = Vec::with_capacity(self.levels.len());
        for (params, &l) in self.attention.iter().zip(&self.levels) {
            let cfg = self.cfg.block_config(self.cfg.channels[l]);
            let level = &pyramid.levels[l];
            let gate = gate_vector(params, &qa, level, &cfg)?;
            attended.push(ops::channel_scale(level, &gate)?);
            gates.push(gate);
        }
        let fused = fuse_pyramid(&attended, &self.lateral)?;
        let head = self.head.forward(&fused)?;
        let logits = upsample_pow2(&head, level_stride(self.levels[0]))?;
        let mask = argmax_mask(&logits)?;
        Ok(ForwardTrace {
            pyramid,
            qa,
            gates,
            fused,
            output: GroundingOutput { logits, mask },
        })
    }

    /// Min-max normalized maps of every channel of backbone level `level`
    /// (before attention), for the first image in the batch.
    pub fn visualize_channels(&self, image: &Tensor, level: usize) -> Result<Vec<ChannelMap>> {
        let pyramid = self.backbone.forward(&center(image)?)?;
        let feat = pyramid.levels.get(level).ok_or(Error::Index {
            index: level,
            len: pyramid.levels.len(),
        })?;
        Ok(channel_maps(feat))
    }
}

impl Parameters for GroundingModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.text.visit(&join(prefix, "text"), f);
        for (p, l) in self.attention.iter().zip(&self.levels) {
            p.visit(&join(prefix, &format!("attention{l}")), f);
        }
        for (c, l) in self.lateral.iter().zip(&self.levels) {
            c.visit(&join(prefix, &format!("fusion.lateral{l}")), f);
        }
        self.head.visit(&join(prefix, "fusion.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        for (p, l) in self.attention.iter_mut().zip(&self.levels) {
            p.visit_mut(&join(prefix, &format!("attention{l}")), f);
        }
        for (c, l) in self.lateral.iter_mut().zip(&self.levels) {
            c.visit_mut(&join(prefix, &format!("fusion.lateral{l}")), f);
        }
        self.head.visit_mut(&join(prefix, "fusion.head"), f);
    }
}

/// Images arrive in `[0, 1]`; the backbone sees `(x + INPUT_SHIFT) · INPUT_SCALE`,
/// i.e. `[-2, 2]`, close to unit variance on the shapes task.
pub const INPUT_SHIFT: f64 = -0.5;
pub const INPUT_SCALE: f64 = 4.0;

fn center(image: &Tensor) -> Result<Tensor> {
    ops::scale(&ops::add(image, &Tensor::full(image.shape(), INPUT_SHIFT))?, INPUT_SCALE)
}

/// Reciprocal of the mean gate value at initialisation: a softmax over `C`
/// channels averages `1/C`, a sigmoid around zero `1/2`.
pub fn gate_gain(gate: Gate, channels: usize) -> f64 {
    match gate {
        Gate::Softmax => channels as f64,
        Gate::Sigmoid => 2.0,
    }
}

/// Top-down merge of attended levels (finest first): starting from the
/// coarsest, `x = upsample2x(lateral(x)) + next finer level` until no level
/// is left.
pub fn fuse_pyramid(attended: &[Tensor], lateral: &[Conv2d]) -> Result<Tensor> {
    let (coarsest, rest) = attended
        .split_last()
        .ok_or_else(|| Error::contract("fuse_pyramid", "no levels to fuse"))?;
    if lateral.len() != rest.len() {
        return Err(Error::contract(
            "fuse_pyramid",
            format!("{} levels need {} lateral convs, got {}", attended.len(), rest.len(), lateral.len()),
        ));
    }
    let mut x = coarsest.clone();
    for (finer, conv) in rest.iter().zip(lateral).rev() {
        let up = bilinear_upsample2x(&conv.forward(&x)?)?;
        if up.shape() != finer.shape() {
            return Err(Error::shape("fuse_pyramid", up.shape(), finer.shape()));
        }
        x = ops::add(&up, finer)?;
    }
    Ok(x)
}

/// Per-pixel argmax over the two logit channels; ties go to background.
pub fn argmax_mask(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 4 || logits.shape()[1] != 2 {
        return Err(Error::shape("argmax_mask", logits.shape(), &[0, 2, 0, 0]));
    }
    let (b, h, w) = (logits.shape()[0], logits.shape()[2], logits.shape()[3]);
    let hw = h * w;
    let mut mask = Vec::with_capacity(b * hw);
    for s in 0..b {
        let bg = &logits.data()[s * 2 * hw..(s * 2 + 1) * hw];
        let fg = &logits.data()[(s * 2 + 1) * hw..(s * 2 + 2) * hw];
        mask.extend(bg.iter().zip(fg).map(|(b, f)| if f > b { 1.0 } else { 0.0 }));
    }
    Tensor::new(mask, &[b, h, w])
}

/// Foreground-minus-background logit margin, `[B × H × W]`.
pub fn foreground_margin(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    if logits.ndim() != 4 || logits.shape()[1] != 2 {
        return Err(Error::shape("foreground_margin", logits.shape(), &[0, 2, 0, 0]));
    }
    let hw = logits.shape()[2] * logits.shape()[3];
    Ok(logits
        .data()
        .chunks(2 * hw)
        .map(|s| s[hw..].iter().zip(&s[..hw]).map(|(f, b)| f - b).collect())
        .collect())
}

/// A single-channel map scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ChannelMap {
    /// 8-bit grayscale, `0 → 0` and `1 → 255`.
    pub fn to_raster(&self) -> crate::data::pnm::Raster {
        crate::data::pnm::Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            bytes: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

/// Min-max normalization of each channel of the first sample in `feat`.
/// A constant channel maps to all zeros.
pub fn channel_maps(feat: &Tensor) -> Vec<ChannelMap> {
    let (c, h, w) = (feat.shape()[1], feat.shape()[2], feat.shape()[3]);
    feat.data()[..c * h * w]
        .chunks(h * w)
        .map(|plane| {
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let data = if range > 0.0 {
                plane.iter().map(|v| (v - lo) / range).collect()
            } else {
                vec![0.0; plane.len()]
            };
            ChannelMap {
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}
