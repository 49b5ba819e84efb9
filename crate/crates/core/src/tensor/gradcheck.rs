//! Central finite differences, used as the independent oracle for every
//! backward rule.

use super::{ComputeGraph, Tensor};
use crate::error::{Error, Result};

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element `i` of `x`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite_difference_gradient", "step must be positive"));
    }
    let mut data = x.data().to_vec();
    let mut grad = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let plus = f(&Tensor::new(data.clone(), x.shape())?)?;
        data[i] = orig - h;
        let minus = f(&Tensor::new(data.clone(), x.shape())?)?;
        data[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(grad, x.shape())
}

/// Relative error with a denominator floor so that entries near zero are
/// judged on an absolute scale.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest `|z|` over every relu input `z` in the graph behind `root`.
/// Central differences with step `h` straddle a kink once this falls to
/// about `h`; gradient checks redraw their inputs until it is well above.
/// Infinite when the graph holds no relu.
pub fn relu_kink_margin(root: &Tensor) -> f64 {
    ComputeGraph::build(root)
        .nodes()
        .iter()
        .filter_map(|n| n.grad_fn().filter(|f| f.op == "relu"))
        .flat_map(|f| f.inputs[0].data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst elementwise relative error over all inputs.
    pub max_rel_error: f64,
    /// Per input, worst relative error.
    pub per_input: Vec<f64>,
    /// Per input, largest gradient magnitude (analytic or numeric).
    pub per_input_scale: Vec<f64>,
    pub evaluations: usize,
}

/// What the relative-error denominator is floored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloorScale {
    /// 1e-3 of the input's own largest gradient magnitude.
    PerInput,
    /// 1e-3 of the largest gradient magnitude over all inputs.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: FloorScale,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: Option<usize>,
}

impl GradCheckOptions {
    pub fn new(step: f64) -> Self {
        GradCheckOptions {
            step,
            floor: FloorScale::PerInput,
            max_entries: None,
        }
    }
}

/// Compares the taped gradient of a scalar function against central finite
/// differences for every element of every input.
///
/// Inputs are re-created as trainable leaves, so callers may pass constants.
/// An entry's error is measured relative to `max(|analytic|, |numeric|)`,
/// floored at 1e-3 of that input's largest gradient magnitude.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_gradients_with(inputs, &GradCheckOptions::new(h), f)
}

/// [`check_gradients`] with a choice of floor and optional entry sampling.
pub fn check_gradients_with<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(opts.step > 0.0) {
        return Err(Error::contract("check_gradients", "step must be positive"));
    }
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::parameter(t.data().to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    out.backward()?;

    let mut evaluations = 1;
    let mut pairs = Vec::with_capacity(inputs.len());
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < leaf.len() => (0..k).map(|j| j * leaf.len() / k).collect(),
            _ => (0..leaf.len()).collect(),
        };
        let mut args: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        let mut data = inputs[idx].data().to_vec();
        let mut numeric = Vec::with_capacity(entries.len());
        for &i in &entries {
            let orig = data[i];
            let mut eval = |x: f64| -> Result<f64> {
                data[i] = x;
                args[idx] = Tensor::new(data.clone(), inputs[idx].shape())?;
                f(&args)?.item()
            };
            let plus = eval(orig + opts.step)?;
            let minus = eval(orig - opts.step)?;
            data[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        evaluations += 2 * entries.len();
        let analytic: Vec<f64> = entries.iter().map(|&i| analytic[i]).collect();
        pairs.push((analytic, numeric));
    }

    let per_input_scale: Vec<f64> = pairs
        .iter()
        .map(|(a, n)| a.iter().chain(n).fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let global = per_input_scale.iter().copied().fold(0.0, f64::max);
    let per_input: Vec<f64> = pairs
        .iter()
        .zip(&per_input_scale)
        .map(|((a, n), &own)| {
            let scale = match opts.floor {
                FloorScale::PerInput => own,
                FloorScale::Global => global,
            };
            let floor = (1e-3 * scale).max(1e-12);
            a.iter()
                .zip(n)
                .map(|(&a, &n)| relative_error(a, n, floor))
                .fold(0.0f64, f64::max)
        })
        .collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        per_input_scale,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![0.5, -1.0, 3.0, 7.0], &[2, 2]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|t| t.item(), &x, 0.0).is_err());
    }

    #[test]
    fn kink_margin_sees_every_relu() {
        let x = Tensor::parameter(vec![0.5, -0.2, 3.0], &[3]).unwrap();
        let y = ops::relu(&ops::scale(&ops::relu(&x).unwrap(), -1.0).unwrap()).unwrap();
        assert!((relu_kink_margin(&y) - 0.0).abs() < 1e-15);
        let z = ops::relu(&x).unwrap();
        assert!((relu_kink_margin(&z) - 0.2).abs() < 1e-15);
        assert_eq!(relu_kink_margin(&ops::sum(&x).unwrap()), f64::INFINITY);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a kink; the taped rule picks the zero branch
        // while the central difference straddles it.
        let x = Tensor::new(vec![0.0], &[1]).unwrap();
        let report = check_gradients(&[x], 1e-5, |v| ops::sum(&ops::relu(&v[0])?)).unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn sampling_and_floors() {
        // gradient 2x for the first input, 1e-6 for the second
        let a = Tensor::new((0..50).map(|i| i as f64 / 10.0).collect(), &[50]).unwrap();
        let b = Tensor::new(vec![0.3, -0.7], &[2]).unwrap();
        let f = |v: &[Tensor]| {
            let sq = ops::sum(&ops::mul(&v[0], &v[0])?)?;
            ops::axpby(1.0, &sq, 1e-6, &ops::sum(&v[1])?)
        };
        let mut opts = GradCheckOptions::new(1e-5);
        opts.max_entries = Some(7);
        let r = check_gradients_with(&[a.clone(), b.clone()], &opts, f).unwrap();
        assert_eq!(r.evaluations, 1 + 2 * (7 + 2));
        assert!((r.per_input_scale[0] - 8.4).abs() < 1e-6, "{r:?}");
        assert!(r.per_input[0] < 1e-6);
        // b's gradient sits near the roundoff of f, which only the global floor forgives
        opts.floor = FloorScale::Global;
        let g = check_gradients_with(&[a, b], &opts, f).unwrap();
        assert!(g.per_input[1] < 1e-6 && g.per_input[1] < r.per_input[1], "{r:?} {g:?}");
    }
}
