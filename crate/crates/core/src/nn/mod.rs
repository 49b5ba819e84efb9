//! Layers and the channel-attention blocks built on the tensor core.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod resample;

use rand::Rng;

use crate::error::Result;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub use attention::{
    sab_forward, se_block, AttentionSource, Gate, Normalization, SabConfig, SabParams,
};
pub use conv::{conv2d, Conv2d};
pub use linear::{linear, LinearLayer};
pub use norm::{channel_softmax, layer_norm, softmax, LayerNormParams};
pub use resample::{avg_pool2d, bilinear_upsample2x, global_avg_pool, upsample_pow2};

/// Walks named trainable tensors. Names are dot-separated paths and unique
/// within a model, which is what checkpoints and the optimizer key on.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic parameter factory: every tensor is drawn from a stream
/// keyed by `(seed, full parameter name)`.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`, which keeps the
    /// activation scale roughly constant through relu layers.
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = rng_for(self.seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::parameter(data, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::parameter(vec![value; n], shape)
    }
}
