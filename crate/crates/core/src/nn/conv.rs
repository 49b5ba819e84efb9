use super::{join, Init, Parameters};
use crate::error::{Error, Result};
use crate::tensor::ops::gemm;
use crate::tensor::Tensor;

/// Square-kernel convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[Cout × Cin × k × k]`
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Ok(Conv2d {
            weight: init.fan_in_uniform(
                &join(name, "weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
            )?,
            bias: if bias {
                Some(init.constant(&[out_channels], 0.0)?)
            } else {
                None
            },
            stride,
            padding,
        })
    }

    /// The same layer with its weights multiplied by `gain`.
    pub fn scaled(self, gain: f64) -> Result<Self> {
        let w: Vec<f64> = self.weight.data().iter().map(|v| v * gain).collect();
        Ok(Conv2d {
            weight: Tensor::parameter(w, self.weight.shape())?,
            ..self
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &Geometry, out: &mut [f64]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols_grad: &[f64], g: &Geometry, dx: &mut [f64]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[B×Cin×H×W]` with `weight[Cout×Cin×k×k]`.
///
/// Output spatial size is `floor((H + 2·padding - k) / stride) + 1`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if x.ndim() != 4 || weight.ndim() != 4 {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, k, k2) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin || k != k2 {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Geometry(format!(
            "conv2d: kernel {k} stride {stride} padding {padding} does not fit input {h}×{w}"
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape("conv2d", weight.shape(), bias.shape()));
        }
    }
    let geo = Geometry {
        cin,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: (h + 2 * padding - k) / stride + 1,
        wo: (w + 2 * padding - k) / stride + 1,
    };
    let (kk, hw_out, in_len) = (geo.rows(), geo.cols(), cin * h * w);

    // Column buffers are kept for the backward pass; pointwise convs read x directly.
    let cols: Vec<f64> = if geo.pointwise() {
        Vec::new()
    } else {
        let mut cols = vec![0.0; b * kk * hw_out];
        for s in 0..b {
            im2col(
                &x.data()[s * in_len..(s + 1) * in_len],
                &geo,
                &mut cols[s * kk * hw_out..(s + 1) * kk * hw_out],
            );
        }
        cols
    };

    let mut out = vec![0.0; b * cout * hw_out];
    for s in 0..b {
        let col = if geo.pointwise() {
            &x.data()[s * in_len..(s + 1) * in_len]
        } else {
            &cols[s * kk * hw_out..(s + 1) * kk * hw_out]
        };
        let dst = &mut out[s * cout * hw_out..(s + 1) * cout * hw_out];
        if let Some(bias) = bias {
            for (plane, &bv) in dst.chunks_mut(hw_out).zip(bias.data()) {
                plane.fill(bv);
            }
        }
        gemm(cout, kk, hw_out, weight.data(), false, col, false, dst, 1.0);
    }

    let xc = x.clone();
    let wc = weight.clone();
    let (x_rg, w_rg) = (x.requires_grad(), weight.requires_grad());
    let has_bias = bias.is_some();
    let mut inputs = vec![x, weight];
    if let Some(bias) = bias {
        inputs.push(bias);
    }
    Tensor::from_op(
        "conv2d",
        out,
        vec![b, cout, geo.ho, geo.wo],
        &inputs,
        Box::new(move |_, g| {
            let mut gw = w_rg.then(|| vec![0.0; cout * kk]);
            let mut gx = x_rg.then(|| vec![0.0; b * in_len]);
            let mut gcol = vec![0.0; if geo.pointwise() { 0 } else { kk * hw_out }];
            for s in 0..b {
                let gs = &g[s * cout * hw_out..(s + 1) * cout * hw_out];
                if let Some(gw) = gw.as_mut() {
                    let col = if geo.pointwise() {
                        &xc.data()[s * in_len..(s + 1) * in_len]
                    } else {
                        &cols[s * kk * hw_out..(s + 1) * kk * hw_out]
                    };
                    gemm(cout, hw_out, kk, gs, false, col, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * in_len..(s + 1) * in_len];
                    if geo.pointwise() {
                        gemm(kk, cout, hw_out, wc.data(), true, gs, false, dst, 0.0);
                    } else {
                        gemm(kk, cout, hw_out, wc.data(), true, gs, false, &mut gcol, 0.0);
                        col2im(&gcol, &geo, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; cout];
                for (i, plane) in g.chunks(hw_out).enumerate() {
                    gb[i % cout] += plane.iter().sum::<f64>();
                }
                grads.push(Some(gb));
            }
            grads
        }),
    )
}
