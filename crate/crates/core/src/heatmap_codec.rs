//! Center-heatmap encoding of boxes and decoding of predicted maps.
//!
//! Maps live on the output grid of stride `R`. Cell `(i, j)` covers output
//! coordinates `[j, j+1) x [i, i+1)`; a pixel coordinate `p` sits at `p / R`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_OVERLAP: f64 = 0.7;

/// Supervision for one study on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `(h, w)` center heatmap in `[0, 1]`.
    pub heatmap: Array2<f32>,
    /// `(2, h, w)` box width/height in output-stride units at center cells.
    pub size: Array3<f32>,
    /// `(2, h, w)` sub-cell center offset in `[0, 1)` at center cells.
    pub offset: Array3<f32>,
    pub center_mask: Array2<bool>,
}

impl TargetMaps {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            heatmap: Array2::zeros((h, w)),
            size: Array3::zeros((2, h, w)),
            offset: Array3::zeros((2, h, w)),
            center_mask: Array2::from_elem((h, w), false),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.heatmap.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Largest corner displacement that keeps IoU with the original box at or
/// above `min_overlap`, taken over the three canonical configurations
/// (box translated diagonally, both corners pulled in, both pushed out).
pub fn gaussian_radius(box_w: f64, box_h: f64, min_overlap: f64) -> Result<f64> {
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::InvalidBox(format!(
            "non-positive size {box_w}x{box_h}"
        )));
    }
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "min_overlap {min_overlap} outside (0, 1)"
        )));
    }
    let (w, h, o) = (box_w, box_h, min_overlap);
    let sum = w + h;
    let prod = w * h;

    // (w - r)(h - r) / (2wh - (w - r)(h - r)) = o
    let c1 = prod * (1.0 - o) / (1.0 + o);
    let r1 = (sum - (sum * sum - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    // (w - 2r)(h - 2r) / wh = o
    let r2 = (2.0 * sum - (4.0 * sum * sum - 16.0 * (1.0 - o) * prod).max(0.0).sqrt()) / 8.0;

    // wh / ((w + 2r)(h + 2r)) = o
    let r3 = (-2.0 * o * sum + (4.0 * o * o * sum * sum + 16.0 * o * (1.0 - o) * prod).sqrt())
        / (8.0 * o);

    Ok(r1.min(r2).min(r3).max(0.0))
}

/// Splats a unit-peak Gaussian (sigma = radius / 3) at an integer cell,
/// combining with existing values by maximum.
pub fn draw_gaussian(heatmap: &mut Array2<f32>, ci: usize, cj: usize, radius: f64) {
    let (h, w) = heatmap.dim();
    let sigma = radius / 3.0;
    let reach = (3.0 * sigma).ceil() as isize;
    for di in -reach..=reach {
        for dj in -reach..=reach {
            let (i, j) = (ci as isize + di, cj as isize + dj);
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                continue;
            }
            let d2 = (di * di + dj * dj) as f64;
            let v = if d2 == 0.0 {
                1.0
            } else if sigma > 0.0 {
                (-d2 / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            } as f32;
            let cell = &mut heatmap[[i as usize, j as usize]];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Encodes pixel-space boxes on an `(height / stride, width / stride)` grid.
pub fn encode(boxes: &[BBox], height: usize, width: usize, stride: usize) -> Result<TargetMaps> {
    encode_with_overlap(boxes, height, width, stride, DEFAULT_MIN_OVERLAP)
}

pub fn encode_with_overlap(
    boxes: &[BBox],
    height: usize,
    width: usize,
    stride: usize,
    min_overlap: f64,
) -> Result<TargetMaps> {
    if stride == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(Error::InvalidConfig(format!(
            "{height}x{width} not divisible by stride {stride}"
        )));
    }
    let (h, w) = (height / stride, width / stride);
    let r = stride as f64;
    let mut maps = TargetMaps::zeros(h, w);
    for b in boxes {
        b.validate_within(width, height)?;
        let (cx, cy) = b.center();
        let (ox, oy) = (cx / r, cy / r);
        // a center on the far image edge belongs to the last cell
        let cj = (ox.floor() as usize).min(w - 1);
        let ci = (oy.floor() as usize).min(h - 1);
        let (bw, bh) = (b.width() / r, b.height() / r);
        let radius = gaussian_radius(bw, bh, min_overlap)?;
        draw_gaussian(&mut maps.heatmap, ci, cj, radius);
        maps.size[[0, ci, cj]] = bw as f32;
        maps.size[[1, ci, cj]] = bh as f32;
        maps.offset[[0, ci, cj]] = (ox - cj as f64) as f32;
        maps.offset[[1, ci, cj]] = (oy - ci as f64) as f32;
        maps.center_mask[[ci, cj]] = true;
    }
    Ok(maps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub score_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            top_k: 64,
            score_threshold: 0.01,
        }
    }
}

/// Extracts 3x3 local maxima of the heatmap, strongest first.
pub fn decode(
    heatmap: ArrayView2<f32>,
    size: ArrayView3<f32>,
    offset: ArrayView3<f32>,
    stride: usize,
    cfg: DecodeConfig,
) -> Result<Vec<Detection>> {
    let (h, w) = heatmap.dim();
    if size.dim() != (2, h, w) || offset.dim() != (2, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {:?}, size {:?}, offset {:?}",
            heatmap.dim(),
            size.dim(),
            offset.dim()
        )));
    }
    let mut peaks: Vec<(f32, usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = heatmap[[i, j]];
            if f64::from(v) < cfg.score_threshold || v.is_nan() {
                continue;
            }
            let is_peak = (i.saturating_sub(1)..(i + 2).min(h))
                .all(|ni| (j.saturating_sub(1)..(j + 2).min(w)).all(|nj| heatmap[[ni, nj]] <= v));
            if is_peak {
                peaks.push((v, i, j));
            }
        }
    }
    // stable: equal scores keep raster order
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));

    let r = stride as f64;
    let (img_w, img_h) = (w as f64 * r, h as f64 * r);
    let dets = peaks
        .into_iter()
        .filter_map(|(score, i, j)| {
            let cx = (r * (j as f64 + f64::from(offset[[0, i, j]]))).clamp(0.0, img_w);
            let cy = (r * (i as f64 + f64::from(offset[[1, i, j]]))).clamp(0.0, img_h);
            let bw = r * f64::from(size[[0, i, j]]).max(0.0);
            let bh = r * f64::from(size[[1, i, j]]).max(0.0);
            let bbox = BBox::new(
                (cx - bw / 2.0).max(0.0),
                (cy - bh / 2.0).max(0.0),
                (cx + bw / 2.0).min(img_w),
                (cy + bh / 2.0).min(img_h),
            );
            bbox.validate().ok()?;
            Some(Detection {
                bbox,
                score: f64::from(score),
            })
        })
        .take(cfg.top_k)
        .collect();
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iou(a: &BBox, b: &BBox) -> f64 {
        let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
        let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
        let inter = iw * ih;
        inter / (a.area() + b.area() - inter)
    }

    /// Worst IoU over the canonical corner configurations, sampled at
    /// every displacement magnitude up to `r`.
    fn worst_canonical_iou(w: f64, h: f64, r: f64) -> f64 {
        let b = BBox::new(0.0, 0.0, w, h);
        let mut worst: f64 = 1.0;
        for step in 0..=50 {
            let t = r * step as f64 / 50.0;
            let mut cands = vec![
                BBox::new(t, t, w - t, h - t),
                BBox::new(-t, -t, w + t, h + t),
            ];
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                cands.push(BBox::new(sx * t, sy * t, w + sx * t, h + sy * t));
            }
            for c in cands {
                worst = worst.min(iou(&b, &c));
            }
        }
        worst
    }

    #[test]
    fn radius_keeps_overlap() {
        for &(w, h) in &[(1.0, 1.0), (2.0, 3.0), (4.0, 4.0), (1.5, 6.0), (10.0, 7.0)] {
            let r = gaussian_radius(w, h, 0.7).unwrap();
            assert!(r > 0.0);
            assert!(worst_canonical_iou(w, h, r) >= 0.7 - 1e-9);
            // and it is tight: a slightly larger radius breaks it
            assert!(worst_canonical_iou(w, h, r * 1.01) < 0.7);
        }
    }

    #[test]
    fn radius_scales_linearly() {
        let base = gaussian_radius(2.0, 3.0, 0.7).unwrap();
        for s in [1.0, 2.0, 4.0] {
            let r = gaussian_radius(2.0 * s, 3.0 * s, 0.7).unwrap();
            assert!((r / base - s).abs() < 1e-9 * s);
        }
    }

    #[test]
    fn tiny_box_radius_is_non_negative() {
        let r = gaussian_radius(0.1, 0.1, 0.7).unwrap();
        assert!((0.0..0.05).contains(&r));
        assert!(gaussian_radius(0.0, 1.0, 0.7).is_err());
        assert!(gaussian_radius(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn empty_boxes_encode_to_zeros() {
        let m = encode(&[], 32, 32, 4).unwrap();
        assert!(m.heatmap.iter().all(|&v| v == 0.0));
        assert!(m.center_mask.iter().all(|&v| !v));
    }

    #[test]
    fn centered_box_hits_cell_exactly() {
        let r = 4.0;
        let c = 3.0;
        let center = r * (c + 0.5);
        let b = BBox::from_center(center, center, 10.0, 6.0);
        let m = encode(&[b], 32, 32, 4).unwrap();
        assert_eq!(m.heatmap[[3, 3]], 1.0);
        assert_eq!(m.offset[[0, 3, 3]], 0.5);
        assert_eq!(m.offset[[1, 3, 3]], 0.5);
        assert_eq!(m.size[[0, 3, 3]], 2.5);
        assert_eq!(m.size[[1, 3, 3]], 1.5);
        let twice = encode(&[b, b], 32, 32, 4).unwrap();
        assert_eq!(twice.heatmap, m.heatmap);
    }

    #[test]
    fn encode_rejects_outside_box() {
        let b = BBox::new(-1.0, 0.0, 5.0, 5.0);
        assert!(encode(&[b], 32, 32, 4).is_err());
        assert!(encode(&[], 30, 32, 4).is_err());
    }

    #[test]
    fn decode_zero_map_is_empty() {
        let z2 = Array2::zeros((8, 8));
        let z3 = Array3::zeros((2, 8, 8));
        let dets = decode(
            z2.view(),
            z3.view(),
            z3.view(),
            4,
            DecodeConfig {
                top_k: 10,
                score_threshold: 0.1,
            },
        )
        .unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn decode_orders_by_score() {
        let mut hm = Array2::zeros((8, 8));
        hm[[1, 1]] = 0.8;
        hm[[5, 5]] = 0.9;
        let mut size = Array3::zeros((2, 8, 8));
        size.fill(1.0);
        let off = Array3::zeros((2, 8, 8));
        let cfg = DecodeConfig {
            top_k: 1,
            score_threshold: 0.1,
        };
        let dets = decode(hm.view(), size.view(), off.view(), 4, cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-6);
        assert_eq!(dets[0].bbox, BBox::new(18.0, 18.0, 22.0, 22.0));
    }

    #[test]
    fn decode_rejects_mismatched_shapes() {
        let hm = Array2::zeros((8, 8));
        let a = Array3::zeros((2, 8, 7));
        let b = Array3::zeros((2, 8, 8));
        assert!(decode(hm.view(), a.view(), b.view(), 4, DecodeConfig::default()).is_err());
    }
}
