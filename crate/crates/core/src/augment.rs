//! Intensity, geometric and sequence-subset transforms.
//!
//! The student sees `gamma_s ∘ geometric ∘ subset`; the teacher sees only
//! `gamma_t ∘ subset`, and its *outputs* are moved into the student's frame
//! with the same geometric map (see [`warp_teacher_outputs`]).
//!
//! Geometry uses continuous coordinates with pixel `(i, j)` centered at
//! `(j + 0.5, i + 0.5)`; rotation and scaling are about the image center.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub gamma: (f64, f64),
    /// Symmetric rotation bound in degrees.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Shift bound as a fraction of the image side.
    pub shift_fraction: f64,
    pub intensity: bool,
    pub geometric: bool,
    pub sequence_subsets: bool,
    /// Multiply warped teacher sizes by the scale factor.
    pub rescale_size_values: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            gamma: (0.5, 2.0),
            rotation_deg: 10.0,
            scale: (0.8, 1.25),
            shift_fraction: 0.25,
            intensity: true,
            geometric: true,
            sequence_subsets: true,
            rescale_size_values: true,
        }
    }
}

/// An affine map: rotate about the center, scale, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation `(dx, dy)` in the units of the grid it is applied to.
    pub shift: (f64, f64),
}

impl Default for GeomParams {
    fn default() -> Self {
        Self::identity()
    }
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else if (v.abs() - 1.0).abs() < 1e-12 {
        v.signum()
    } else {
        v
    }
}

impl GeomParams {
    pub const fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            shift: (0.0, 0.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Same map expressed on a grid downsampled by `stride`.
    pub fn for_grid(&self, stride: usize) -> Self {
        let r = stride as f64;
        Self {
            shift: (self.shift.0 / r, self.shift.1 / r),
            ..*self
        }
    }

    /// `(cos, sin)`, exact for multiples of 90 degrees.
    fn cos_sin(&self) -> (f64, f64) {
        let t = self.rotation_deg.to_radians();
        (snap(t.cos()), snap(t.sin()))
    }

    pub fn apply(&self, x: f64, y: f64, width: f64, height: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        let (cx, cy) = (width / 2.0, height / 2.0);
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + self.scale * (c * dx - s * dy) + self.shift.0,
            cy + self.scale * (s * dx + c * dy) + self.shift.1,
        )
    }

    pub fn apply_inverse(&self, x: f64, y: f64, width: f64, height: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        let (cx, cy) = (width / 2.0, height / 2.0);
        let (dx, dy) = (
            (x - cx - self.shift.0) / self.scale,
            (y - cy - self.shift.1) / self.scale,
        );
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }

    pub fn inverse(&self) -> Self {
        // g^-1(p) = c + (1/s) R(-t) (p - c - shift)
        let (c, s) = self.cos_sin();
        let inv_s = 1.0 / self.scale;
        let (tx, ty) = self.shift;
        Self {
            rotation_deg: -self.rotation_deg,
            scale: inv_s,
            shift: (-inv_s * (c * tx + s * ty), -inv_s * (-s * tx + c * ty)),
        }
    }

    /// Box of the transformed object, modelling the object as the ellipse
    /// inscribed in `b`: the center moves with the map, the semi-axes scale,
    /// and the extent is that of the rotated ellipse.
    pub fn transform_box(&self, b: &BBox, width: f64, height: f64) -> BBox {
        let (cx, cy) = b.center();
        let (ncx, ncy) = self.apply(cx, cy, width, height);
        let (c, s) = self.cos_sin();
        let (a, bb) = (b.width() / 2.0, b.height() / 2.0);
        let hw = self.scale * (a * a * c * c + bb * bb * s * s).sqrt();
        let hh = self.scale * (a * a * s * s + bb * bb * c * c).sqrt();
        BBox::new(ncx - hw, ncy - hh, ncx + hw, ncy + hh)
    }
}

/// One sampled set of transforms shared by a student/teacher pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub gamma_student: f64,
    pub gamma_teacher: f64,
    /// In image pixels.
    pub geom: GeomParams,
    pub sequence_subset: Vec<String>,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Picks `n` uniformly in `1..=len`, then a uniform `n`-combination.
pub fn sample_subset(available: &[String], rng: &mut Rng) -> Result<Vec<String>> {
    if available.is_empty() {
        return Err(Error::NoSequences);
    }
    let n = rng.random_range(1..=available.len());
    let mut picks = index::sample(rng, available.len(), n).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| available[i].clone()).collect())
}

pub fn sample_augment(
    available: &[String],
    height: usize,
    width: usize,
    rng: &mut Rng,
    ranges: &AugmentRanges,
) -> Result<AugmentSpec> {
    if available.is_empty() {
        return Err(Error::NoSequences);
    }
    let sequence_subset = if ranges.sequence_subsets {
        sample_subset(available, rng)?
    } else {
        available.to_vec()
    };
    let (gamma_student, gamma_teacher) = if ranges.intensity {
        (uniform(rng, ranges.gamma), uniform(rng, ranges.gamma))
    } else {
        (1.0, 1.0)
    };
    let geom = if ranges.geometric {
        let r = ranges.rotation_deg;
        let (mx, my) = (
            ranges.shift_fraction * width as f64,
            ranges.shift_fraction * height as f64,
        );
        GeomParams {
            rotation_deg: uniform(rng, (-r, r)),
            scale: uniform(rng, ranges.scale),
            shift: (uniform(rng, (-mx, mx)), uniform(rng, (-my, my))),
        }
    } else {
        GeomParams::identity()
    };
    Ok(AugmentSpec {
        gamma_student,
        gamma_teacher,
        geom,
        sequence_subset,
    })
}

/// Pixel-wise `x^gamma` on an image in `[0, 1]`.
pub fn apply_intensity(image: ArrayView2<f32>, gamma: f64) -> Result<Array2<f32>> {
    if let Some(v) = image.iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Invariant(format!(
            "gamma needs non-negative pixels, got {v}"
        )));
    }
    if gamma == 1.0 {
        return Ok(image.to_owned());
    }
    let g = gamma as f32;
    Ok(image.mapv(|x| x.powf(g)))
}

fn bilinear(src: ArrayView2<f32>, u: f64, v: f64) -> f32 {
    // (u, v) in index space: column, row
    let (h, w) = src.dim();
    let (j0, i0) = (u.floor(), v.floor());
    let (fx, fy) = ((u - j0) as f32, (v - i0) as f32);
    let at = |i: f64, j: f64| -> f32 {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            src[[i as usize, j as usize]]
        }
    };
    let top = (1.0 - fx) * at(i0, j0) + fx * at(i0, j0 + 1.0);
    let bottom = (1.0 - fx) * at(i0 + 1.0, j0) + fx * at(i0 + 1.0, j0 + 1.0);
    (1.0 - fy) * top + fy * bottom
}

/// Resamples `src` through `g` (output pixel `p` reads `src` at `g^-1(p)`),
/// bilinear with zero padding.
pub fn warp_plane(src: ArrayView2<f32>, g: &GeomParams) -> Array2<f32> {
    let (h, w) = src.dim();
    if g.is_identity() {
        return src.to_owned();
    }
    let (wf, hf) = (w as f64, h as f64);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (x, y) = g.apply_inverse(j as f64 + 0.5, i as f64 + 0.5, wf, hf);
        bilinear(src, x - 0.5, y - 0.5)
    })
}

pub fn apply_geometric_to_image(image: ArrayView2<f32>, g: &GeomParams) -> Array2<f32> {
    warp_plane(image, g)
}

/// Moves teacher heatmap and size maps into the student's frame. `g` is the
/// image-space map used on the student input; it is rescaled to the output
/// grid here. Size values are multiplied by the scale factor when
/// `rescale_size_values` is set. Offsets are never warped.
pub fn warp_teacher_outputs(
    heatmap: ArrayView2<f32>,
    size: ArrayView3<f32>,
    g: &GeomParams,
    stride: usize,
    rescale_size_values: bool,
) -> (Array2<f32>, Array3<f32>) {
    let gg = g.for_grid(stride);
    let heat = warp_plane(heatmap, &gg);
    let factor = if rescale_size_values {
        g.scale as f32
    } else {
        1.0
    };
    let planes: Vec<Array2<f32>> = size
        .axis_iter(Axis(0))
        .map(|p| {
            let mut warped = warp_plane(p, &gg);
            if factor != 1.0 {
                warped.mapv_inplace(|v| (v * factor).max(0.0));
            }
            warped
        })
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let size = ndarray::stack(Axis(0), &views).expect("equal planes");
    (heat, size)
}
