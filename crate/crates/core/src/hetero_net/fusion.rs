use ndarray::{concatenate, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

fn check(inputs: &[ArrayView3<f32>]) -> Result<(usize, usize, usize)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Empty("fusion needs at least one activation map".into()))?;
    let dim = first.dim();
    if let Some(bad) = inputs.iter().find(|a| a.dim() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs {:?} vs {:?}",
            dim,
            bad.dim()
        )));
    }
    Ok(dim)
}

/// Element-wise mean and population variance with the summands visited in
/// sorted order, so the result is bit-identical under input permutation.
fn moments(values: &mut [f32]) -> (f32, f32) {
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len() as f32;
    let mean = values.iter().sum::<f32>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, var)
}

/// Hetero-modal fusion: `mean(A) ++ var(A)` along channels, `C -> 2C`.
pub fn fuse(inputs: &[ArrayView3<f32>]) -> Result<Array3<f32>> {
    let (c, h, w) = check(inputs)?;
    let mut mean = Array3::<f32>::zeros((c, h, w));
    let mut var = Array3::<f32>::zeros((c, h, w));
    let mut buf = vec![0.0f32; inputs.len()];
    for ((idx, m), v) in mean.indexed_iter_mut().zip(var.iter_mut()) {
        for (slot, a) in buf.iter_mut().zip(inputs) {
            *slot = a[idx];
        }
        (*m, *v) = moments(&mut buf);
    }
    Ok(concatenate(Axis(0), &[mean.view(), var.view()]).expect("matching shapes"))
}

/// Gradient of [`fuse`] with respect to each input, given the `2C`-channel
/// upstream gradient.
pub fn fuse_backward(
    inputs: &[ArrayView3<f32>],
    grad: ArrayView3<f32>,
) -> Result<Vec<Array3<f32>>> {
    let (c, h, w) = check(inputs)?;
    if grad.dim() != (2 * c, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "fusion grad {:?}, expected {:?}",
            grad.dim(),
            (2 * c, h, w)
        )));
    }
    let n = inputs.len() as f32;
    let mut out: Vec<Array3<f32>> = inputs.iter().map(|_| Array3::zeros((c, h, w))).collect();
    let mut buf = vec![0.0f32; inputs.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                for (slot, a) in buf.iter_mut().zip(inputs) {
                    *slot = a[[ch, i, j]];
                }
                let (mean, _) = moments(&mut buf);
                let g_mean = grad[[ch, i, j]];
                let g_var = grad[[c + ch, i, j]];
                for (a, o) in inputs.iter().zip(out.iter_mut()) {
                    o[[ch, i, j]] = g_mean / n + g_var * 2.0 * (a[[ch, i, j]] - mean) / n;
                }
            }
        }
    }
    Ok(out)
}
