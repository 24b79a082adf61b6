//! Supervised center-heatmap losses and the student/teacher consistency loss.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction, so callers can backpropagate without an autodiff engine.
//! The functions are generic over the float type; training uses `f32`, the
//! gradient checks use `f64`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap_codec::TargetMaps;
use crate::hetero_net::{DetectorOutput, OutputGrads};

pub const CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupLossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub size_weight: f64,
    pub offset_weight: f64,
}

impl Default for SupLossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 2.0,
            focal_beta: 4.0,
            size_weight: 0.1,
            offset_weight: 1.0,
        }
    }
}

impl SupLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_alpha > 0.0 && self.focal_beta > 0.0) {
            return Err(Error::InvalidConfig(
                "focal exponents must be positive".into(),
            ));
        }
        if !(self.size_weight >= 0.0 && self.offset_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsLossConfig {
    /// Weight of the size-map term.
    pub lambda_size: f64,
}

impl Default for ConsLossConfig {
    fn default() -> Self {
        Self { lambda_size: 0.02 }
    }
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable constant")
}

/// Penalty-reduced pixel-wise focal loss, normalized by the number of
/// positive (`Y == 1`) cells, at least one.
pub fn focal_heatmap_loss<F: Float>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    alpha: f64,
    beta: f64,
) -> Result<(F, Array2<F>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (a, b) = (cast::<F>(alpha), cast::<F>(beta));
    let eps = cast::<F>(CLAMP_EPS);
    let one = F::one();
    let n_pos = target.iter().filter(|&&y| y == one).count().max(1);
    let norm = F::from(n_pos).expect("count");

    let mut total = F::zero();
    let mut grad = Array2::<F>::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p_raw, &y| {
            let clamped = p_raw < eps || p_raw > one - eps;
            let p = p_raw.max(eps).min(one - eps);
            let (loss, dp) = if y == one {
                // -(1 - p)^a log p
                let w = (one - p).powf(a);
                let l = -w * p.ln();
                let d = a * (one - p).powf(a - one) * p.ln() - w / p;
                (l, d)
            } else {
                // -(1 - y)^b p^a log(1 - p)
                let damp = (one - y).powf(b);
                let pa = p.powf(a);
                let l = -damp * pa * (one - p).ln();
                let d = -damp * (a * p.powf(a - one) * (one - p).ln() - pa / (one - p));
                (l, d)
            };
            total = total + loss;
            *g = if clamped { F::zero() } else { dp / norm };
        });
    Ok((total / norm, grad))
}

/// Mean absolute error over the masked cells and all channels; zero (with a
/// zero gradient) when the mask is empty.
pub fn masked_l1<F: Float>(
    pred: ArrayView3<F>,
    target: ArrayView3<F>,
    mask: ArrayView2<bool>,
) -> Result<(F, Array3<F>)> {
    let (c, h, w) = pred.dim();
    if target.dim() != (c, h, w) || mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    let mut grad = Array3::<F>::zeros((c, h, w));
    let n_mask = mask.iter().filter(|&&m| m).count();
    if n_mask == 0 {
        return Ok((F::zero(), grad));
    }
    let denom = F::from(n_mask * c).expect("count");
    let mut total = F::zero();
    for ((ch, i, j), g) in grad.indexed_iter_mut() {
        if !mask[[i, j]] {
            continue;
        }
        let d = pred[[ch, i, j]] - target[[ch, i, j]];
        total = total + d.abs();
        *g = if d > F::zero() {
            F::one() / denom
        } else if d < F::zero() {
            -F::one() / denom
        } else {
            F::zero()
        };
    }
    Ok((total / denom, grad))
}

/// Mean squared error over every element, with its gradient w.r.t. `pred`.
pub fn mse<F: Float, D: ndarray::Dimension>(
    pred: ndarray::ArrayView<F, D>,
    target: ndarray::ArrayView<F, D>,
) -> Result<(F, ndarray::Array<F, D>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = F::from(pred.len().max(1)).expect("count");
    let two = cast::<F>(2.0);
    let mut total = F::zero();
    let grad = Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        let d = p - t;
        total = total + d * d;
        two * d / n
    });
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLoss {
    pub total: f64,
    pub heatmap: f64,
    pub size: f64,
    pub offset: f64,
}

/// `focal + w_size * L1(size) + w_off * L1(offset)` plus output gradients.
pub fn sup_loss(
    output: &DetectorOutput,
    targets: &TargetMaps,
    cfg: &SupLossConfig,
) -> Result<(SupLoss, OutputGrads)> {
    let (heatmap, g_heat) = focal_heatmap_loss(
        output.heatmap.view(),
        targets.heatmap.view(),
        cfg.focal_alpha,
        cfg.focal_beta,
    )?;
    let (size, g_size) = masked_l1(
        output.size.view(),
        targets.size.view(),
        targets.center_mask.view(),
    )?;
    let (offset, g_off) = masked_l1(
        output.offset.view(),
        targets.offset.view(),
        targets.center_mask.view(),
    )?;
    let (ws, wo) = (cfg.size_weight as f32, cfg.offset_weight as f32);
    let grads = OutputGrads {
        heatmap: g_heat,
        size: g_size.mapv(|g| g * ws),
        offset: g_off.mapv(|g| g * wo),
    };
    let (heatmap, size, offset) = (f64::from(heatmap), f64::from(size), f64::from(offset));
    let loss = SupLoss {
        total: heatmap + cfg.size_weight * size + cfg.offset_weight * offset,
        heatmap,
        size,
        offset,
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsLoss {
    pub total: f64,
    pub heatmap: f64,
    pub size: f64,
}

/// `mse(Y_s, Y_t) + lambda_size * mse(D_s, D_t)`. Teacher maps are constants:
/// gradients are returned for the student only, and the offset map is never
/// compared.
pub fn consistency_loss(
    student: &DetectorOutput,
    teacher_heatmap: ArrayView2<f32>,
    teacher_size: ArrayView3<f32>,
    cfg: &ConsLossConfig,
) -> Result<(ConsLoss, OutputGrads)> {
    let (lh, gh) = mse(student.heatmap.view(), teacher_heatmap)?;
    let (ls, gs) = mse(student.size.view(), teacher_size)?;
    let lambda = cfg.lambda_size as f32;
    let (h, w) = student.grid();
    let grads = OutputGrads {
        heatmap: gh,
        size: gs.mapv(|g| g * lambda),
        offset: Array3::zeros((2, h, w)),
    };
    let (lh, ls) = (f64::from(lh), f64::from(ls));
    Ok((
        ConsLoss {
            total: lh + cfg.lambda_size * ls,
            heatmap: lh,
            size: ls,
        },
        grads,
    ))
}
