use super::{join, Init, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(init: &Init, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(LinearLayer {
            weight: init.fan_in_uniform(
                &join(name, "weight"),
                &[out_features, in_features],
                in_features,
            )?,
            bias: init.constant(&[out_features], 0.0)?,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("linear", weight.shape(), bias.shape()));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameters for LinearLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn linear(layer: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[1] != layer.in_features() {
        return Err(Error::shape("linear", x.shape(), layer.weight.shape()));
    }
    let wt = ops::transpose(&layer.weight)?;
    ops::add_row_bias(&ops::matmul(x, &wt)?, &layer.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    #[test]
    fn zero_weights_emit_bias() {
        let layer = LinearLayer::from_parts(
            Tensor::zeros(&[3, 2]),
            Tensor::new(vec![1.0, -2.0, 0.5], &[3]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![4.0, 5.0, -6.0, 7.0], &[2, 2]).unwrap();
        let y = linear(&layer, &x).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn identity_weights_pass_through() {
        let layer = LinearLayer::from_parts(
            Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let x = Tensor::new(vec![0.25, -3.0, 8.0, 1.5], &[2, 2]).unwrap();
        assert_eq!(linear(&layer, &x).unwrap().data(), x.data());
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let layer = LinearLayer::new(&Init::new(0), "fc", 4, 2).unwrap();
        assert!(matches!(
            linear(&layer, &Tensor::zeros(&[1, 3])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let layer = LinearLayer::new(&Init::new(seed), "fc", 5, 3).unwrap();
            let mut b = layer.bias.data().to_vec();
            b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.05);
            let x = Init::new(seed + 50).fan_in_uniform("x", &[4, 5], 1).unwrap();
            let report = check_gradients(
                &[x, layer.weight.clone(), Tensor::new(b, &[3]).unwrap()],
                1e-5,
                |v| {
                    let l = LinearLayer::from_parts(v[1].clone(), v[2].clone())?;
                    let y = linear(&l, &v[0])?;
                    ops::sum(&ops::mul(&y, &y)?)
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
