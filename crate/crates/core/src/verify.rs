//! Finite-difference suites over every differentiable op, the losses and the
//! full model.
//!
//! Each case draws random inputs per seed, reduces the op's output to a
//! scalar with a fixed random projection, and compares taped gradients with
//! central differences at [`STEP`]. Inputs are redrawn while any relu input
//! lies within [`KINK_MARGIN`] of zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{combined_loss, cross_entropy, one_hot, rmi_loss, LossConfig};
use crate::model::{GroundingModel, ModelConfig};
use crate::nn::{
    avg_pool2d, bilinear_upsample2x, channel_softmax, conv2d, global_avg_pool, layer_norm, linear,
    sab_forward, se_block, softmax, upsample_pow2, Gate, Init, LayerNormParams, LinearLayer,
    Normalization, Parameters, SabConfig, SabParams,
};
use crate::seed::rng_for;
use crate::tensor::{
    check_gradients_with, ops, relu_kink_margin, FloorScale, GradCheckOptions, Tensor,
};
use crate::text::TextConfig;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-4;
/// Model-plus-loss cases redraw until every class probability is at least
/// this. A saturated softmax shrinks every gradient toward the roundoff of
/// the loss, where central differences stop measuring anything.
pub const MIN_PROBABILITY: f64 = 1e-6;
const MAX_DRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Tensor primitives, layers and the attention blocks.
    Block,
    /// Cross-entropy, RMI and their combination.
    Loss,
    /// The grounding model end to end on one 32×32 image.
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Block, Scope::Loss, Scope::Model];
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Scope::Block),
            "loss" => Ok(Scope::Loss),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Block => "block",
            Scope::Loss => "loss",
            Scope::Model => "model",
        })
    }
}

/// Worst relative error of one case over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Names of the cases run for `scope`, in order.
pub fn case_names(scope: Scope) -> Vec<&'static str> {
    cases(scope).iter().map(|c| c.0).collect()
}

/// Runs every case of `scope` for seeds `0..seeds`.
pub fn run_scope(scope: Scope, seeds: u64) -> Result<Vec<OpCheck>> {
    if seeds == 0 {
        return Err(Error::contract("gradcheck", "need at least one seed"));
    }
    cases(scope)
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = rng_for(seed, &format!("gradcheck.{name}"));
                worst = worst.max(case(&mut rng)?);
            }
            Ok(OpCheck {
                name,
                seeds: seeds as usize,
                max_rel_error: worst,
            })
        })
        .collect()
}

fn cases(scope: Scope) -> Vec<(&'static str, Case)> {
    match scope {
        Scope::Block => vec![
            ("matmul", |r| binary(r, &[3, 4], &[4, 5], ops::matmul)),
            ("transpose", |r| unary(r, &[3, 4], ops::transpose)),
            ("add", |r| binary(r, &[3, 4], &[3, 4], ops::add)),
            ("sub", |r| binary(r, &[3, 4], &[3, 4], ops::sub)),
            ("mul", |r| binary(r, &[3, 4], &[3, 4], ops::mul)),
            ("scale", |r| unary(r, &[3, 4], |x| ops::scale(x, -1.7))),
            ("axpby", |r| binary(r, &[3, 4], &[3, 4], |a, b| ops::axpby(0.3, a, -1.2, b))),
            ("sum", |r| unary(r, &[3, 4], ops::sum)),
            ("mean", |r| unary(r, &[3, 4], ops::mean)),
            ("relu", |r| unary(r, &[4, 5], ops::relu)),
            ("sigmoid", |r| unary(r, &[4, 5], ops::sigmoid)),
            ("reshape", |r| unary(r, &[3, 4], |x| ops::reshape(x, &[2, 6]))),
            ("add_row_bias", |r| binary(r, &[3, 4], &[4], ops::add_row_bias)),
            ("concat_cols", |r| binary(r, &[3, 2], &[3, 4], ops::concat_cols)),
            ("channel_scale", |r| binary(r, &[2, 3, 4, 4], &[2, 3], ops::channel_scale)),
            ("linear", |r| {
                projected(r, shapes(&[&[3, 5], &[4, 5], &[4]]), |v| linear(&LinearLayer::from_parts(v[1].clone(), v[2].clone())?, &v[0]))
            }),
            ("layer_norm", |r| {
                projected(r, shapes(&[&[3, 6], &[6], &[6]]), |v| {
                    let p = LayerNormParams::from_parts(v[1].clone(), v[2].clone(), LayerNormParams::DEFAULT_EPSILON)?;
                    layer_norm(&p, &v[0])
                })
            }),
            ("softmax", |r| unary(r, &[3, 5], softmax)),
            ("channel_softmax", |r| unary(r, &[2, 3, 4, 4], channel_softmax)),
            ("conv2d 3x3", |r| conv_case(r, 3, 1, 1, true)),
            ("conv2d 3x3 stride 2", |r| conv_case(r, 3, 2, 1, true)),
            ("conv2d 1x1 no bias", |r| conv_case(r, 1, 1, 0, false)),
            ("bilinear_upsample2x", |r| unary(r, &[2, 3, 4, 5], bilinear_upsample2x)),
            ("upsample x4", |r| unary(r, &[1, 2, 3, 4], |x| upsample_pow2(x, 4))),
            ("avg_pool2d", |r| unary(r, &[2, 3, 6, 8], |x| avg_pool2d(x, 2))),
            ("global_avg_pool", |r| unary(r, &[2, 3, 4, 5], global_avg_pool)),
            ("se_block", |r| {
                let params = SabParams::new(&Init::new(r.gen()), "se", &SabConfig::squeeze_excitation(8))?;
                block_case(r, params, &[&[2, 8, 3, 3]], |p, v| se_block(&v[0], p))
            }),
            ("sab_forward", |r| sab_case(r, SabConfig::sentence(4, 6))),
            ("sab_forward sigmoid, no norm, bottleneck", |r| {
                let cfg = SabConfig {
                    normalization: Normalization::None,
                    gate: Gate::Sigmoid,
                    expansion: false,
                    ..SabConfig::sentence(4, 6)
                };
                sab_case(r, cfg)
            }),
        ],
        Scope::Loss => vec![
            ("cross_entropy", |r| {
                let mask = random_mask(r, &[2, 6, 6]);
                scalar(&[uniform(r, &[2, 2, 6, 6])], |v| cross_entropy(&v[0], &mask))
            }),
            ("rmi", |r| {
                let mask = random_mask(r, &[2, 12, 12]);
                let cfg = LossConfig::default();
                let target = one_hot(&mask)?;
                scalar(&[uniform(r, &[2, 2, 12, 12])], |v| rmi_loss(&channel_softmax(&v[0])?, &target, &cfg))
            }),
            ("combined lambda=0", |r| combined_case(r, 0.0)),
            ("combined lambda=0.5", |r| combined_case(r, 0.5)),
            ("combined lambda=1", |r| combined_case(r, 1.0)),
        ],
        Scope::Model => vec![
            ("model logits 1x3x32x32", |r| model_case(r, None)),
            ("model + combined lambda=0", |r| model_case(r, Some(0.0))),
            ("model + combined lambda=0.5", |r| model_case(r, Some(0.5))),
            ("model + combined lambda=1", |r| model_case(r, Some(1.0))),
        ],
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).expect("shape matches")
}

fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect(), shape).expect("shape matches")
}

/// Checks `sum(f(inputs) ⊙ w)` for a random `w`, calling `draw` again while
/// some relu input sits near its kink.
fn projected<D, F>(rng: &mut ChaCha8Rng, draw: D, f: F) -> Result<f64>
where
    D: FnMut(&mut ChaCha8Rng) -> Result<Vec<Tensor>>,
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    projected_with(rng, &GradCheckOptions::new(STEP), draw, f)
}

fn projected_with<D, F>(rng: &mut ChaCha8Rng, opts: &GradCheckOptions, mut draw: D, f: F) -> Result<f64>
where
    D: FnMut(&mut ChaCha8Rng) -> Result<Vec<Tensor>>,
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for _ in 0..MAX_DRAWS {
        let inputs = draw(rng)?;
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::parameter(t.data().to_vec(), t.shape()))
            .collect::<Result<_>>()?;
        let probe = f(&leaves)?;
        if relu_kink_margin(&probe) > KINK_MARGIN {
            let w = uniform(rng, probe.shape());
            let report = check_gradients_with(&inputs, opts, |v| ops::sum(&ops::mul(&f(v)?, &w)?))?;
            return Ok(report.max_rel_error);
        }
    }
    Err(Error::contract("gradcheck", "could not draw inputs away from relu kinks"))
}

fn scalar(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<f64> {
    Ok(check_gradients_with(inputs, &GradCheckOptions::new(STEP), f)?.max_rel_error)
}

fn shapes(shapes: &'static [&'static [usize]]) -> impl FnMut(&mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    move |r| Ok(shapes.iter().map(|s| uniform(r, s)).collect())
}

fn unary(rng: &mut ChaCha8Rng, shape: &'static [usize], f: fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    projected(rng, move |r| Ok(vec![uniform(r, shape)]), |v| f(&v[0]))
}

fn binary<F>(rng: &mut ChaCha8Rng, a: &'static [usize], b: &'static [usize], f: F) -> Result<f64>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    projected(rng, move |r| Ok(vec![uniform(r, a), uniform(r, b)]), |v| f(&v[0], &v[1]))
}

fn conv_case(rng: &mut ChaCha8Rng, k: usize, stride: usize, padding: usize, bias: bool) -> Result<f64> {
    let draw = move |r: &mut ChaCha8Rng| {
        let mut inputs = vec![uniform(r, &[2, 3, 6, 6]), uniform(r, &[4, 3, k, k])];
        if bias {
            inputs.push(uniform(r, &[4]));
        }
        Ok(inputs)
    };
    projected(rng, draw, |v| conv2d(&v[0], &v[1], v.get(2), stride, padding))
}

/// Checks `f(params, extra)` with respect to `extra` and every parameter,
/// all drawn uniformly.
fn block_case<P, F>(rng: &mut ChaCha8Rng, params: P, extra: &'static [&'static [usize]], f: F) -> Result<f64>
where
    P: Parameters + Clone,
    F: Fn(&P, &[Tensor]) -> Result<Tensor>,
{
    let n = extra.len();
    let param_shapes: Vec<Vec<usize>> = params.named_parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let draw = |r: &mut ChaCha8Rng| {
        let mut inputs: Vec<Tensor> = extra.iter().map(|s| uniform(r, s)).collect();
        inputs.extend(param_shapes.iter().map(|s| uniform(r, s)));
        Ok(inputs)
    };
    projected(rng, draw, |v| f(&with_parameters(&params, &v[n..]), &v[..n]))
}

fn with_parameters<P: Parameters + Clone>(params: &P, values: &[Tensor]) -> P {
    let mut p = params.clone();
    let mut it = values.iter();
    p.visit_mut("", &mut |_, t| *t = it.next().expect("one tensor per parameter").clone());
    p
}

fn sab_case(rng: &mut ChaCha8Rng, cfg: SabConfig) -> Result<f64> {
    let params = SabParams::new(&Init::new(rng.gen()), "sab", &cfg)?;
    block_case(rng, params, &[&[2, 8], &[2, 6, 3, 3]], move |p, v| sab_forward(p, &v[0], &v[1], &cfg))
}

fn combined_case(rng: &mut ChaCha8Rng, lambda: f64) -> Result<f64> {
    let mask = random_mask(rng, &[2, 12, 12]);
    let cfg = LossConfig {
        lambda,
        ..LossConfig::default()
    };
    scalar(&[uniform(rng, &[2, 2, 12, 12])], |v| combined_loss(&v[0], &mask, &cfg))
}

/// Small widths keep the parameter count, and so the number of forward
/// passes, low; the structure is the full model's.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        text: TextConfig {
            embed_size: 4,
            ..TextConfig::default()
        },
        stem_channels: 4,
        channels: vec![4, 6, 8, 10],
        ..ModelConfig::default()
    }
}

/// Entries checked per tensor in the model scope; all are checked elsewhere.
pub const MODEL_ENTRIES: usize = 32;

/// Projected logits when `lambda` is `None`, otherwise the combined loss
/// against a random mask.
///
/// With a loss on top, the single-pixel coarsest level contributes gradients
/// some five orders of magnitude below the rest, under the roundoff of the
/// loss value. Those cases floor the error against the largest gradient of
/// the whole check instead of each tensor's own.
/// Smallest class probability anywhere in `logits[B × 2 × H × W]`.
fn min_probability(logits: &Tensor) -> Result<f64> {
    Ok(channel_softmax(logits)?.data().iter().copied().fold(1.0, f64::min))
}

fn model_case(rng: &mut ChaCha8Rng, lambda: Option<f64>) -> Result<f64> {
    let model = GroundingModel::new(&gradcheck_model_config(), rng.gen())?;
    let pairs = [("where is the red circle?", "red circle")];
    let logits = |v: &[Tensor]| Ok(with_parameters(&model, &v[1..]).forward(&v[0], &pairs)?.logits);
    let draw = |r: &mut ChaCha8Rng| {
        for _ in 0..MAX_DRAWS {
            let image = Tensor::new((0..3 * 32 * 32).map(|_| r.gen_range(0.0..1.0)).collect(), &[1, 3, 32, 32])?;
            let mut inputs = vec![image];
            for (_, t) in model.named_parameters() {
                // nonzero biases and layer-norm shifts, so every term is exercised
                let data = t.data().iter().map(|&v| v + r.gen_range(-0.1..0.1)).collect();
                inputs.push(Tensor::new(data, t.shape())?);
            }
            if lambda.is_none() || min_probability(&logits(&inputs)?)? >= MIN_PROBABILITY {
                return Ok(inputs);
            }
        }
        Err(Error::contract("gradcheck", "could not draw an unsaturated model"))
    };
    let mut opts = GradCheckOptions {
        max_entries: Some(MODEL_ENTRIES),
        ..GradCheckOptions::new(STEP)
    };
    match lambda {
        None => projected_with(rng, &opts, draw, logits),
        Some(lambda) => {
            opts.floor = FloorScale::Global;
            let mask = random_mask(rng, &[1, 32, 32]);
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            projected_with(rng, &opts, draw, |v| combined_loss(&logits(v)?, &mask, &cfg))
        }
    }
}
