//! Pixel cross-entropy, region mutual information (RMI) and their
//! weighted sum.
//!
//! RMI treats each `r × r` neighborhood of the (average-pooled) target and
//! prediction maps as a `d = r²` dimensional sample. With centered sample
//! covariances `Σ_Y`, `Σ_P` and cross-covariance `Cov(Y, P)`, the residual
//!
//! ```text
//! M = Σ_Y − Cov(Y,P) · (Σ_P + δI)⁻ᵀ · Cov(Y,P)ᵀ + εI
//! ```
//!
//! is the covariance of the target left unexplained by the prediction, and
//! the loss is `(1/2d) · trace(log M)` per class. Eigenvalues of `M` are
//! clamped to at least `ε` before the log.
//!
//! `δ` (`inverse_ridge`) regularizes the inversion of `Σ_P` and is kept far
//! below `ε`, so a perfect prediction gives `M ≈ εI` and a loss of `ln(ε)/2`
//! per class.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::channel_softmax;
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of cross-entropy; RMI gets `1 - lambda`.
    pub lambda: f64,
    pub rmi_region_side: usize,
    pub rmi_downsample: usize,
    pub matrix_epsilon: f64,
    pub inverse_ridge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            rmi_region_side: 3,
            rmi_downsample: 2,
            matrix_epsilon: 1e-3,
            inverse_ridge: 1e-10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.rmi_region_side == 0 || self.rmi_region_side % 2 == 0 {
            return Err(Error::Config(format!(
                "rmi_region_side {} must be odd and positive",
                self.rmi_region_side
            )));
        }
        if self.rmi_downsample == 0 {
            return Err(Error::Config("rmi_downsample must be positive".into()));
        }
        if !(self.matrix_epsilon > 0.0) || !(self.inverse_ridge > 0.0) {
            return Err(Error::Config("matrix_epsilon and inverse_ridge must be positive".into()));
        }
        Ok(())
    }

    pub fn region_dim(&self) -> usize {
        self.rmi_region_side * self.rmi_region_side
    }
}

fn check_binary(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::contract(op, format!("target value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Mean over batch and pixels of `-log softmax(logits)[target]`.
///
/// `logits` is `[B × 2 × H × W]`, `target` is `[B × H × W]` with values in {0, 1}.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 2 || target.shape() != [s[0], s[2], s[3]] {
        return Err(Error::shape("cross_entropy", s, target.shape()));
    }
    check_binary("cross_entropy", target)?;
    let (b, hw) = (s[0], s[2] * s[3]);
    let count = (b * hw) as f64;
    let mut total = 0.0;
    // d loss / d logit, scaled by 1/count
    let mut grad = vec![0.0; logits.len()];
    for n in 0..b {
        for p in 0..hw {
            let i0 = n * 2 * hw + p;
            let i1 = i0 + hw;
            let (l0, l1) = (logits.data()[i0], logits.data()[i1]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let t = target.data()[n * hw + p];
            total += lse - if t == 1.0 { l1 } else { l0 };
            let p1 = (l1 - lse).exp();
            grad[i0] = (1.0 - p1 - (1.0 - t)) / count;
            grad[i1] = (p1 - t) / count;
        }
    }
    Tensor::from_op(
        "cross_entropy",
        vec![total / count],
        vec![],
        &[logits],
        Box::new(move |_, g| vec![Some(grad.iter().map(|v| v * g[0]).collect())]),
    )
}

/// Two-channel one-hot encoding of a binary mask `[B × H × W]`.
pub fn one_hot(mask: &Tensor) -> Result<Tensor> {
    if mask.ndim() != 3 {
        return Err(Error::shape("one_hot", mask.shape(), &[0, 0, 0]));
    }
    check_binary("one_hot", mask)?;
    let (b, hw) = (mask.shape()[0], mask.shape()[1] * mask.shape()[2]);
    let mut out = Vec::with_capacity(2 * mask.len());
    for plane in mask.data().chunks(hw).take(b) {
        out.extend(plane.iter().map(|v| 1.0 - v));
        out.extend_from_slice(plane);
    }
    Tensor::new(out, &[b, 2, mask.shape()[1], mask.shape()[2]])
}

/// Counters from one RMI evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmiDiagnostics {
    /// Eigenvalues of `M` that fell below `ε` and were clamped.
    pub clamped_eigenvalues: usize,
    /// Largest `|M - Mᵀ|` entry seen before symmetrization.
    pub max_asymmetry: f64,
}

fn avg_pool_plane(src: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += src[(y * f + dy) * w + x * f + dx];
                }
            }
            out[y * pw + x] = s * norm;
        }
    }
    (out, ph, pw)
}

/// `N × d` matrix of valid `r × r` neighborhoods, columns centered.
fn centered_regions(plane: &[f64], h: usize, w: usize, r: usize) -> DMatrix<f64> {
    let (nh, nw) = (h - r + 1, w - r + 1);
    let mut m = DMatrix::zeros(nh * nw, r * r);
    for y in 0..nh {
        for x in 0..nw {
            for dy in 0..r {
                for dx in 0..r {
                    m[(y * nw + x, dy * r + dx)] = plane[(y + dy) * w + x + dx];
                }
            }
        }
    }
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

struct ClassTerm {
    loss: f64,
    clamped: usize,
    asymmetry: f64,
    /// d loss / d centered prediction regions, `N × d`; `None` if unused.
    grad_regions: Option<DMatrix<f64>>,
}

/// Loss for one class of one sample, from centered region matrices.
///
/// The Schur complement `Cov·(Σ_P + δI)⁻¹·Covᵀ` is formed from a QR
/// factorization of `Pc` stacked on `√(Nδ)·I` rather than by inverting
/// `Σ_P`: with `Pc = Q₁R`, it equals `(Q₁ᵀYc)ᵀ(Q₁ᵀYc) / N`. Smooth
/// predictions make `Σ_P` badly conditioned, and this form pays the
/// condition number of `Pc` instead of its square.
fn rmi_class_term(pc: &DMatrix<f64>, yc: &DMatrix<f64>, cfg: &LossConfig, want_grad: bool) -> ClassTerm {
    let (rows, d) = (pc.nrows(), pc.ncols());
    let n = rows as f64;
    let sigma_y = yc.transpose() * yc / n;

    let mut stacked = DMatrix::zeros(rows + d, d);
    stacked.rows_mut(0, rows).copy_from(pc);
    stacked.rows_mut(rows, d).fill_diagonal((n * cfg.inverse_ridge).sqrt());
    let qr = stacked.qr();
    let (q, r) = (qr.q(), qr.r());
    let t = q.rows(0, rows).transpose() * yc;

    let mut m = &sigma_y - t.transpose() * &t / n;
    for i in 0..d {
        m[(i, i)] += cfg.matrix_epsilon;
    }
    let asymmetry = (&m - m.transpose()).amax();
    let m = (&m + m.transpose()) * 0.5;

    let eig_m = SymmetricEigen::new(m);
    let scale = 1.0 / (2.0 * d as f64);
    let mut clamped = 0;
    let mut loss = 0.0;
    let mut dlog = eig_m.eigenvalues.clone();
    for (lam, dl) in eig_m.eigenvalues.iter().zip(dlog.iter_mut()) {
        if *lam < cfg.matrix_epsilon {
            clamped += 1;
            loss += cfg.matrix_epsilon.ln();
            *dl = 0.0;
        } else {
            loss += lam.ln();
            *dl = 1.0 / lam;
        }
    }
    loss *= scale;

    let grad_regions = want_grad.then(|| {
        let v = &eig_m.eigenvectors;
        let g = v * DMatrix::from_diagonal(&(dlog * scale)) * v.transpose();
        // K = Cov·(Σ_P + δI)⁻¹ = Tᵀ R⁻ᵀ; with the regression residual
        // E = Yc − Pc·Kᵀ, d loss / d Pc = −(2/N)·E·G·K.
        let k_t = r.solve_upper_triangular(&t).expect("ridge keeps R nonsingular");
        let residual = yc - pc * &k_t;
        residual * g * k_t.transpose() * (-2.0 / n)
    });

    ClassTerm {
        loss,
        clamped,
        asymmetry,
        grad_regions,
    }
}

/// RMI between `prob` and `target_onehot` (both `[B × C × H × W]`), summed
/// over classes and averaged over the batch.
pub fn rmi_loss(prob: &Tensor, target_onehot: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(rmi_loss_with_diagnostics(prob, target_onehot, cfg)?.0)
}

pub fn rmi_loss_with_diagnostics(
    prob: &Tensor,
    target_onehot: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, RmiDiagnostics)> {
    cfg.validate()?;
    let s = prob.shape().to_vec();
    if s.len() != 4 || target_onehot.shape() != s.as_slice() {
        return Err(Error::shape("rmi_loss", &s, target_onehot.shape()));
    }
    if let Some(v) = prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("rmi_loss", format!("probability {v} outside [0, 1]")));
    }
    if let Some(v) = target_onehot.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("rmi_loss", format!("target value {v} outside [0, 1]")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (f, r) = (cfg.rmi_downsample, cfg.rmi_region_side);
    let (ph, pw) = (h / f, w / f);
    if ph < r || pw < r {
        return Err(Error::Geometry(format!(
            "{h}×{w} map pooled by {f} is smaller than the {r}×{r} region"
        )));
    }
    let (nh, nw) = (ph - r + 1, pw - r + 1);
    let want_grad = prob.requires_grad();
    let hw = h * w;

    let mut total = 0.0;
    let mut diag = RmiDiagnostics::default();
    let mut grad = want_grad.then(|| vec![0.0; prob.len()]);
    for plane in 0..b * c {
        let range = plane * hw..(plane + 1) * hw;
        let (pp, _, _) = avg_pool_plane(&prob.data()[range.clone()], h, w, f);
        let (yp, _, _) = avg_pool_plane(&target_onehot.data()[range.clone()], h, w, f);
        let term = rmi_class_term(
            &centered_regions(&pp, ph, pw, r),
            &centered_regions(&yp, ph, pw, r),
            cfg,
            want_grad,
        );
        total += term.loss;
        diag.clamped_eigenvalues += term.clamped;
        diag.max_asymmetry = diag.max_asymmetry.max(term.asymmetry);

        if let (Some(grad), Some(mut gr)) = (grad.as_mut(), term.grad_regions) {
            // centering: subtract each column's mean gradient
            for mut col in gr.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            let mut gpool = vec![0.0; ph * pw];
            for y in 0..nh {
                for x in 0..nw {
                    for dy in 0..r {
                        for dx in 0..r {
                            gpool[(y + dy) * pw + x + dx] += gr[(y * nw + x, dy * r + dx)];
                        }
                    }
                }
            }
            let norm = 1.0 / (f * f) as f64;
            let gplane = &mut grad[range];
            for y in 0..ph * f {
                for x in 0..pw * f {
                    gplane[y * w + x] = gpool[(y / f) * pw + x / f] * norm;
                }
            }
        }
    }
    let batch = b as f64;
    let out = Tensor::from_op(
        "rmi_loss",
        vec![total / batch],
        vec![],
        &[prob],
        Box::new(move |_, g| {
            vec![grad
                .as_ref()
                .map(|v| v.iter().map(|x| x * g[0] / batch).collect())]
        }),
    )?;
    Ok((out, diag))
}

/// Values of the individual terms alongside the differentiable total.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub cross_entropy: Option<f64>,
    pub rmi: Option<f64>,
    pub diagnostics: RmiDiagnostics,
}

/// `λ·CE(logits, mask) + (1−λ)·RMI(softmax(logits), onehot(mask))`.
/// A zero-weighted term is not evaluated.
pub fn combined_loss(logits: &Tensor, target_mask: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(combined_loss_terms(logits, target_mask, cfg)?.total)
}

pub fn combined_loss_terms(logits: &Tensor, target_mask: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let lambda = cfg.lambda;
    let ce = if lambda > 0.0 {
        Some(cross_entropy(logits, target_mask)?)
    } else {
        None
    };
    let (rmi, diagnostics) = if lambda < 1.0 {
        let prob = channel_softmax(logits)?;
        let (t, d) = rmi_loss_with_diagnostics(&prob, &one_hot(target_mask)?, cfg)?;
        (Some(t), d)
    } else {
        (None, RmiDiagnostics::default())
    };
    let total = match (&ce, &rmi) {
        (Some(ce), Some(rmi)) => ops::axpby(lambda, ce, 1.0 - lambda, rmi)?,
        (Some(ce), None) => ce.clone(),
        (None, Some(rmi)) => rmi.clone(),
        (None, None) => unreachable!("lambda lies in [0, 1]"),
    };
    Ok(LossTerms {
        total,
        cross_entropy: ce.map(|t| t.item()).transpose()?,
        rmi: rmi.map(|t| t.item()).transpose()?,
        diagnostics,
    })
}
