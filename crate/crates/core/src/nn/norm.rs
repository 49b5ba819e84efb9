use super::{join, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-row affine normalization parameters.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub shift: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Unit gain, zero shift.
    pub fn new(width: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: Tensor::parameter(vec![1.0; width], &[width])?,
            shift: Tensor::parameter(vec![0.0; width], &[width])?,
            epsilon: Self::DEFAULT_EPSILON,
        })
    }

    pub fn from_parts(gain: Tensor, shift: Tensor, epsilon: f64) -> Result<Self> {
        if gain.shape() != shift.shape() || gain.ndim() != 1 {
            return Err(Error::shape("layer_norm", gain.shape(), shift.shape()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::contract("layer_norm", "epsilon must be positive"));
        }
        Ok(LayerNormParams {
            gain,
            shift,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }
}

impl Parameters for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

/// Row-wise `(x - mean) / sqrt(var + eps) * gain + shift` with the biased
/// (divide-by-n) variance.
pub fn layer_norm(p: &LayerNormParams, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[1] != p.width() {
        return Err(Error::shape("layer_norm", x.shape(), p.gain.shape()));
    }
    let n = p.width();
    if n < 2 {
        return Err(Error::contract("layer_norm", "row width must be at least 2"));
    }
    if !(p.epsilon > 0.0) {
        return Err(Error::contract("layer_norm", "epsilon must be positive"));
    }
    let rows = x.shape()[0];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for (r, (row, out)) in x.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + p.epsilon).sqrt();
        inv_std[r] = s;
        out.iter_mut().zip(row).for_each(|(o, v)| *o = (v - mean) * s);
    }
    let mut y = xhat.clone();
    for row in y.chunks_mut(n) {
        for ((v, g), b) in row.iter_mut().zip(p.gain.data()).zip(p.shift.data()) {
            *v = *v * g + b;
        }
    }
    let gain = p.gain.clone();
    Tensor::from_op(
        "layer_norm",
        y,
        x.shape().to_vec(),
        &[x, &p.gain, &p.shift],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; g.len()];
            let mut ggain = vec![0.0; n];
            let mut gshift = vec![0.0; n];
            for r in 0..rows {
                let gy = &g[r * n..(r + 1) * n];
                let xh = &xhat[r * n..(r + 1) * n];
                let mut mean_gxh = 0.0;
                let mut mean_gxh_xh = 0.0;
                for i in 0..n {
                    let gxh = gy[i] * gain.data()[i];
                    mean_gxh += gxh;
                    mean_gxh_xh += gxh * xh[i];
                    ggain[i] += gy[i] * xh[i];
                    gshift[i] += gy[i];
                }
                mean_gxh /= n as f64;
                mean_gxh_xh /= n as f64;
                for i in 0..n {
                    let gxh = gy[i] * gain.data()[i];
                    gx[r * n + i] = inv_std[r] * (gxh - mean_gxh - xh[i] * mean_gxh_xh);
                }
            }
            vec![Some(gx), Some(ggain), Some(gshift)]
        }),
    )
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Softmax over the last axis of a 2-d tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::contract(
            "softmax",
            format!("expected [batch × C], got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    let mut y = x.data().to_vec();
    y.chunks_mut(c).for_each(softmax_in_place);
    Tensor::from_op(
        "softmax",
        y,
        x.shape().to_vec(),
        &[x],
        Box::new(move |y, g| {
            let mut gx = vec![0.0; g.len()];
            for ((gx, y), g) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Softmax across the channel axis of `[B × C × H × W]`, independently per pixel.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::contract(
            "channel_softmax",
            format!("expected [B × C × H × W], got {:?}", x.shape()),
        ));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let mut y = x.data().to_vec();
    let mut buf = vec![0.0; c];
    for s in 0..b {
        let base = s * c * hw;
        for p in 0..hw {
            for k in 0..c {
                buf[k] = y[base + k * hw + p];
            }
            softmax_in_place(&mut buf);
            for k in 0..c {
                y[base + k * hw + p] = buf[k];
            }
        }
    }
    Tensor::from_op(
        "channel_softmax",
        y,
        x.shape().to_vec(),
        &[x],
        Box::new(move |y, g| {
            let mut gx = vec![0.0; g.len()];
            for s in 0..b {
                let base = s * c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..c)
                        .map(|k| y[base + k * hw + p] * g[base + k * hw + p])
                        .sum();
                    for k in 0..c {
                        let i = base + k * hw + p;
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}
