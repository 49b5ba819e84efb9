//! Differentiable primitives: matrix products, elementwise maps, reductions
//! and the few broadcasting patterns the network needs.

use super::Tensor;
use crate::error::{Error, Result};

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape m×k
/// and `op(b)` of shape k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn expect_ndim(op: &'static str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::contract(
            op,
            format!("expected {ndim}-d tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_ndim("matmul", a, 2)?;
    expect_ndim("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);

    let (ac, bc) = (a.clone(), b.clone());
    let (a_rg, b_rg) = (a.requires_grad(), b.requires_grad());
    Tensor::from_op(
        "matmul",
        out,
        vec![m, n],
        &[a, b],
        Box::new(move |_, g| {
            let ga = a_rg.then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bc.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = b_rg.then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ac.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }),
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_ndim("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let out = transpose_data(a.data(), m, n);
    Tensor::from_op(
        "transpose",
        out,
        vec![n, m],
        &[a],
        Box::new(move |_, g| vec![Some(transpose_data(g, n, m))]),
    )
}

fn transpose_data(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_op(
        "add",
        out,
        a.shape().to_vec(),
        &[a, b],
        Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::from_op(
        "sub",
        out,
        a.shape().to_vec(),
        &[a, b],
        Box::new(|_, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    )
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        "mul",
        out,
        a.shape().to_vec(),
        &[a, b],
        Box::new(move |_, g| {
            let ga = g.iter().zip(bc.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(ac.data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    )
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    let out = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(
        "scale",
        out,
        a.shape().to_vec(),
        &[a],
        Box::new(move |_, g| vec![Some(g.iter().map(|v| v * factor).collect())]),
    )
}

/// Weighted sum `wa * a + wb * b` of two same-shape tensors.
pub fn axpby(wa: f64, a: &Tensor, wb: f64, b: &Tensor) -> Result<Tensor> {
    same_shape("axpby", a, b)?;
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| wa * x + wb * y)
        .collect();
    Tensor::from_op(
        "axpby",
        out,
        a.shape().to_vec(),
        &[a, b],
        Box::new(move |_, g| {
            vec![
                Some(g.iter().map(|v| wa * v).collect()),
                Some(g.iter().map(|v| wb * v).collect()),
            ]
        }),
    )
}

pub fn sum(a: &Tensor) -> Result<Tensor> {
    let n = a.len();
    Tensor::from_op(
        "sum",
        vec![a.data().iter().sum()],
        vec![],
        &[a],
        Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    let n = a.len();
    let inv = 1.0 / n as f64;
    Tensor::from_op(
        "mean",
        vec![a.data().iter().sum::<f64>() * inv],
        vec![],
        &[a],
        Box::new(move |_, g| vec![Some(vec![g[0] * inv; n])]),
    )
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    let out = a.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_op(
        "relu",
        out,
        a.shape().to_vec(),
        &[a],
        Box::new(|y, g| {
            vec![Some(
                y.iter()
                    .zip(g)
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        }),
    )
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    let out = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::from_op(
        "sigmoid",
        out,
        a.shape().to_vec(),
        &[a],
        Box::new(|y, g| {
            vec![Some(
                y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
            )]
        }),
    )
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.len() {
        return Err(Error::shape("reshape", a.shape(), shape));
    }
    Tensor::from_op(
        "reshape",
        a.data().to_vec(),
        shape.to_vec(),
        &[a],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    )
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_ndim("add_row_bias", x, 2)?;
    let n = x.shape()[1];
    if bias.shape() != [n] {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    Tensor::from_op(
        "add_row_bias",
        out,
        x.shape().to_vec(),
        &[x, bias],
        Box::new(move |_, g| {
            let mut gb = vec![0.0; n];
            for row in g.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }),
    )
}

/// Joins `a[m×p]` and `b[m×q]` into `[m×(p+q)]`, `a` first.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_ndim("concat_cols", a, 2)?;
    expect_ndim("concat_cols", b, 2)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("concat_cols", a.shape(), b.shape()));
    }
    let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(m * (p + q));
    for i in 0..m {
        out.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
        out.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
    }
    Tensor::from_op(
        "concat_cols",
        out,
        vec![m, p + q],
        &[a, b],
        Box::new(move |_, g| {
            let mut ga = Vec::with_capacity(m * p);
            let mut gb = Vec::with_capacity(m * q);
            for row in g.chunks(p + q) {
                ga.extend_from_slice(&row[..p]);
                gb.extend_from_slice(&row[p..]);
            }
            vec![Some(ga), Some(gb)]
        }),
    )
}

/// Scales channel `c` of sample `b` in `x[B×C×H×W]` by `gate[b, c]`.
pub fn channel_scale(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    expect_ndim("channel_scale", x, 4)?;
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if gate.shape() != [b, c] {
        return Err(Error::shape("channel_scale", x.shape(), gate.shape()));
    }
    let hw = x.shape()[2] * x.shape()[3];
    let mut out = x.data().to_vec();
    for (plane, &w) in out.chunks_mut(hw).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= w);
    }
    let (xc, gc) = (x.clone(), gate.clone());
    Tensor::from_op(
        "channel_scale",
        out,
        x.shape().to_vec(),
        &[x, gate],
        Box::new(move |_, g| {
            let mut gx = g.to_vec();
            let mut gg = vec![0.0; b * c];
            for (i, ((gplane, xplane), &w)) in gx
                .chunks_mut(hw)
                .zip(xc.data().chunks(hw))
                .zip(gc.data())
                .enumerate()
            {
                gg[i] = gplane.iter().zip(xplane).map(|(g, x)| g * x).sum();
                gplane.iter_mut().for_each(|v| *v *= w);
            }
            vec![Some(gx), Some(gg)]
        }),
    )
}
