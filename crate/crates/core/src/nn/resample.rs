use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::contract(
            op,
            format!("expected [B × C × H × W], got {:?}", x.shape()),
        ));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Source taps for one output coordinate of a 2× half-pixel upsample:
/// `s = (t + 0.5) / 2 - 0.5`, clamped to `[0, n - 1]`.
#[derive(Debug, Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn upsample_taps(n: usize) -> Vec<Taps> {
    (0..2 * n)
        .map(|t| {
            let s = ((t as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = s.floor() as usize;
            Taps {
                lo,
                hi: (lo + 1).min(n - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear 2× upsampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = dims4("bilinear_upsample2x", x)?;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (h2, w2) = (2 * h, 2 * w);
    let planes = b * c;
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let top = src[ay.lo * w + ax.lo] * (1.0 - ax.frac) + src[ay.lo * w + ax.hi] * ax.frac;
                let bot = src[ay.hi * w + ax.lo] * (1.0 - ax.frac) + src[ay.hi * w + ax.hi] * ax.frac;
                dst[oy * w2 + ox] = top * (1.0 - ay.frac) + bot * ay.frac;
            }
        }
    }
    Tensor::from_op(
        "bilinear_upsample2x",
        out,
        vec![b, c, h2, w2],
        &[x],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, ay) in ty.iter().enumerate() {
                    for (ox, ax) in tx.iter().enumerate() {
                        let v = gs[oy * w2 + ox];
                        let (top, bot) = (v * (1.0 - ay.frac), v * ay.frac);
                        dst[ay.lo * w + ax.lo] += top * (1.0 - ax.frac);
                        dst[ay.lo * w + ax.hi] += top * ax.frac;
                        dst[ay.hi * w + ax.lo] += bot * (1.0 - ax.frac);
                        dst[ay.hi * w + ax.hi] += bot * ax.frac;
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Repeated 2× upsampling; `factor` must be a power of two.
pub fn upsample_pow2(x: &Tensor, factor: usize) -> Result<Tensor> {
    if !factor.is_power_of_two() {
        return Err(Error::contract(
            "upsample_pow2",
            format!("factor {factor} is not a power of two"),
        ));
    }
    let mut y = x.clone();
    for _ in 0..factor.trailing_zeros() {
        y = bilinear_upsample2x(&y)?;
    }
    Ok(y)
}

/// Non-overlapping `factor × factor` average pooling. Trailing rows/columns
/// that do not fill a window are dropped.
pub fn avg_pool2d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4("avg_pool2d", x)?;
    if factor == 0 || h < factor || w < factor {
        return Err(Error::Geometry(format!(
            "avg_pool2d: factor {factor} does not fit {h}×{w}"
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let planes = b * c;
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * w + ox * factor;
                    acc += src[row..row + factor].iter().sum::<f64>();
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::from_op(
        "avg_pool2d",
        out,
        vec![b, c, ho, wo],
        &[x],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gs = &g[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = gs[oy * wo + ox] * inv;
                        for dy in 0..factor {
                            let row = (oy * factor + dy) * w + ox * factor;
                            dst[row..row + factor].iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Spatial mean: `[B × C × H × W] -> [B × C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = dims4("global_avg_pool", x)?;
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Tensor::from_op(
        "global_avg_pool",
        out,
        vec![b, c],
        &[x],
        Box::new(move |_, g| {
            let mut gx = Vec::with_capacity(b * c * hw);
            for &v in g {
                gx.extend(std::iter::repeat(v * inv).take(hw));
            }
            vec![Some(gx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, ops};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Scalar evaluation of the half-pixel formula at one target cell.
    fn oracle(src: &[[f64; 2]; 2], ty: usize, tx: usize) -> f64 {
        let coord = |t: usize| ((t as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        let (sy, sx) = (coord(ty), coord(tx));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * src[y0][x0] + fx * src[y0][x1])
            + fy * ((1.0 - fx) * src[y1][x0] + fx * src[y1][x1])
    }

    #[test]
    fn constant_stays_constant() {
        let y = bilinear_upsample2x(&Tensor::full(&[1, 2, 3, 4], 2.5)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 8]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_replicates() {
        let y = bilinear_upsample2x(&Tensor::new(vec![7.0], &[1, 1, 1, 1]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0; 4]);
    }

    #[test]
    fn two_by_two_grid_matches_formula() {
        let src = [[1.0, 2.0], [3.0, 4.0]];
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        for ty in 0..4 {
            for tx in 0..4 {
                assert!((y.data()[ty * 4 + tx] - oracle(&src, ty, tx)).abs() < 1e-15);
            }
        }
        // first row: 1, 1.25, 1.75, 2
        assert_eq!(&y.data()[..4], &[1.0, 1.25, 1.75, 2.0]);
    }

    #[test]
    fn pools_and_upsample_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand = |shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
            };
            let x = rand(&[2, 2, 3, 5]);
            let w_up = rand(&[2, 2, 12, 20]);
            let w_pool = rand(&[2, 2, 6, 10]);
            let w_gap = rand(&[2, 2]);
            let report = check_gradients(&[x], 1e-5, |v| {
                let up = upsample_pow2(&v[0], 4)?;
                let a = ops::sum(&ops::mul(&up, &w_up)?)?;
                let pooled = avg_pool2d(&up, 2)?;
                let b = ops::sum(&ops::mul(&pooled, &w_pool)?)?;
                let c = ops::sum(&ops::mul(&global_avg_pool(&pooled)?, &w_gap)?)?;
                ops::add(&ops::add(&a, &b)?, &c)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn avg_pool_values() {
        let x = Tensor::new((0..16).map(f64::from).collect(), &[1, 1, 4, 4]).unwrap();
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(avg_pool2d(&x, 5).is_err());
    }
}
