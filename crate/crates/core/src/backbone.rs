//! Small multi-scale convolutional feature extractor.
//!
//! A stride-2 stem followed by four stages, each `[3×3 stride 2, relu,
//! 3×3 stride 1, relu]`. The stage outputs form the pyramid at strides
//! 4, 8, 16 and 32, ordered fine to coarse.

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Init, Parameters};
use crate::tensor::{ops, Tensor};

/// Stride of pyramid level `i` relative to the input image.
pub fn level_stride(level: usize) -> usize {
    4 << level
}

/// Per-scale feature maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Spatial halving and strictly increasing channels from one level to the next.
    pub fn check_invariants(&self) -> Result<()> {
        for pair in self.levels.windows(2) {
            let (fine, coarse) = (pair[0].shape(), pair[1].shape());
            let halved = fine[2] == 2 * coarse[2] && fine[3] == 2 * coarse[3];
            if fine.len() != 4 || coarse.len() != 4 || !halved || fine[1] >= coarse[1] || fine[0] != coarse[0] {
                return Err(Error::shape("feature_pyramid", fine, coarse));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Conv2d,
    pub refine: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(init: &Init, stem_channels: usize, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() || stem_channels == 0 || channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let stem = Conv2d::new(init, "backbone.stem", 3, stem_channels, 3, 2, 1, true)?;
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = stem_channels;
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            stages.push(Stage {
                down: Conv2d::new(init, &join(&name, "down"), prev, c, 3, 2, 1, true)?,
                refine: Conv2d::new(init, &join(&name, "refine"), c, c, 3, 1, 1, true)?,
            });
            prev = c;
        }
        Ok(Backbone { stem, stages })
    }

    /// Required divisor of input height and width.
    pub fn input_multiple(&self) -> usize {
        2 << self.stages.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.refine.out_channels()).collect()
    }

    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        if image.ndim() != 4 || image.shape()[1] != 3 {
            return Err(Error::Geometry(format!(
                "expected image batch [B × 3 × H × W], got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let m = self.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Geometry(format!(
                "image {h}×{w} is not divisible by {m}"
            )));
        }
        let mut x = ops::relu(&self.stem.forward(image)?)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = ops::relu(&stage.down.forward(&x)?)?;
            x = ops::relu(&stage.refine.forward(&x)?)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let name = join(prefix, &format!("stage{i}"));
            s.down.visit(&join(&name, "down"), f);
            s.refine.visit(&join(&name, "refine"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let name = join(prefix, &format!("stage{i}"));
            s.down.visit_mut(&join(&name, "down"), f);
            s.refine.visit_mut(&join(&name, "refine"), f);
        }
    }
}

/// Free-function form of [`Backbone::forward`].
pub fn backbone_forward(image: &Tensor, backbone: &Backbone) -> Result<FeaturePyramid> {
    backbone.forward(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, relu_kink_margin};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_backbone(seed: u64) -> Backbone {
        Backbone::new(&Init::new(seed), 16, &[16, 32, 64, 128]).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let bb = default_backbone(0);
        let p = bb.forward(&Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 128, 2, 2]]
        );
        p.check_invariants().unwrap();
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pyramid() {
        let p = default_backbone(1).forward(&Tensor::zeros(&[1, 3, 32, 64])).unwrap();
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let bb = default_backbone(0);
        assert!(matches!(bb.forward(&Tensor::zeros(&[1, 3, 60, 64])), Err(Error::Geometry(_))));
        assert!(matches!(bb.forward(&Tensor::zeros(&[1, 1, 64, 64])), Err(Error::Geometry(_))));
    }

    #[test]
    fn translation_covariance_on_interior() {
        let bb = default_backbone(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (64, 64);
        let base: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut shifted = vec![0.0; base.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 4..w {
                    shifted[(c * h + y) * w + x] = base[(c * h + y) * w + x - 4];
                }
            }
        }
        let a = bb.forward(&Tensor::new(base, &[1, 3, h, w]).unwrap()).unwrap();
        let b = bb.forward(&Tensor::new(shifted, &[1, 3, h, w]).unwrap()).unwrap();
        let (la, lb) = (&a.levels[0], &b.levels[0]);
        let (c, lh, lw) = (la.shape()[1], la.shape()[2], la.shape()[3]);
        // receptive field of level 0 spans a few cells; skip a generous border
        for ch in 0..c {
            for y in 3..lh - 3 {
                for x in 3..lw - 4 {
                    let va = la.data()[(ch * lh + y) * lw + x];
                    let vb = lb.data()[(ch * lh + y) * lw + x + 1];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_through_full_backbone() {
        for seed in 0..10 {
            let bb = Backbone::new(&Init::new(seed), 4, &[4, 6, 8, 10]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // redraw the image until no relu input sits near its kink
            let image = loop {
                let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.gen_range(-0.5..0.5)).collect(), &[1, 3, 32, 32]).unwrap();
                let leaf = Tensor::parameter(img.data().to_vec(), img.shape()).unwrap();
                let levels = bb.forward(&leaf).unwrap().levels;
                if levels.iter().map(relu_kink_margin).fold(f64::INFINITY, f64::min) > 1e-4 {
                    break img;
                }
            };
            let weights: Vec<Tensor> = bb
                .forward(&image)
                .unwrap()
                .levels
                .iter()
                .map(|l| Tensor::new((0..l.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), l.shape()).unwrap())
                .collect();
            let mut inputs = vec![image];
            inputs.extend(bb.named_parameters().into_iter().map(|(_, t)| t));
            let report = check_gradients(&inputs, 1e-5, |v| {
                let mut b = bb.clone();
                let mut it = v[1..].iter();
                b.visit_mut("", &mut |_, t| *t = it.next().unwrap().clone());
                let p = b.forward(&v[0])?;
                let mut total = Tensor::scalar(0.0);
                for (l, w) in p.levels.iter().zip(&weights) {
                    total = ops::add(&total, &ops::sum(&ops::mul(l, w)?)?)?;
                }
                Ok(total)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
