#![allow(dead_code)]

use mthd_core::froc_eval::StudyEval;
use mthd_core::heatmap_codec::Detection;
use mthd_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scores every threshold by filtering, re-matching from scratch and
/// counting; shares no code with the library's sweep.
pub fn brute_force_froc(studies: &[StudyEval], fp_points: &[f64]) -> Vec<f64> {
    let total_gt: usize = studies.iter().map(|s| s.gts.len()).sum();
    let mut thresholds: Vec<f64> = studies
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.score))
        .collect();
    thresholds.push(f64::INFINITY);
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for s in studies {
            let mut kept: Vec<(usize, &Detection)> = s
                .detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.score >= t)
                .collect();
            kept.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
            });
            let mut taken = vec![false; s.gts.len()];
            for (_, d) in kept {
                let mut best: Option<(f64, usize)> = None;
                for (g, gt) in s.gts.iter().enumerate() {
                    if taken[g] {
                        continue;
                    }
                    let v = naive_iou(&d.bbox, gt);
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, g));
                    }
                }
                match best {
                    Some((v, g)) if v > 0.5 => {
                        taken[g] = true;
                        tp += 1;
                    }
                    _ => fp += 1,
                }
            }
        }
        points.push((
            fp as f64 / studies.len() as f64,
            tp as f64 / total_gt as f64,
        ));
    }
    fp_points
        .iter()
        .map(|&p| {
            points
                .iter()
                .filter(|(f, _)| *f <= p)
                .map(|(_, s)| *s)
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min)
        + (b.x_max - b.x_min) * (b.y_max - b.y_min)
        - inter;
    inter / union
}

/// Up to `max_studies` studies with a few lesions each; detections jitter
/// around lesions or land elsewhere, with scores on a coarse grid so that
/// ties are common.
pub fn random_froc_instance(rng: &mut ChaCha8Rng, max_studies: usize) -> Vec<StudyEval> {
    loop {
        let n = rng.random_range(1..=max_studies);
        let studies: Vec<StudyEval> = (0..n)
            .map(|s| {
                let gts: Vec<BBox> = (0..rng.random_range(0..=3))
                    .map(|g| {
                        let x = 20.0 * g as f64 + rng.random_range(0.0..5.0);
                        BBox::new(x, 10.0, x + 8.0, 18.0)
                    })
                    .collect();
                let detections = (0..rng.random_range(0..=6))
                    .map(|_| {
                        let score = f64::from(rng.random_range(0..=8u8)) / 8.0;
                        let bbox = if !gts.is_empty() && rng.random_bool(0.6) {
                            let g = gts[rng.random_range(0..gts.len())];
                            let dx = rng.random_range(-4.0..4.0);
                            BBox::new(g.x_min + dx, g.y_min, g.x_max + dx, g.y_max)
                        } else {
                            let x = rng.random_range(0.0..80.0);
                            BBox::new(x, 40.0, x + 8.0, 48.0)
                        };
                        Detection { bbox, score }
                    })
                    .collect();
                StudyEval {
                    study_id: format!("s{s}"),
                    detections,
                    gts,
                }
            })
            .collect();
        if studies.iter().any(|s| !s.gts.is_empty()) {
            return studies;
        }
    }
}

/// The three-study example: A hits both lesions at .9/.8 with a false
/// positive at .7, B misses its lesion with false positives at .6/.5, C hits
/// at .4.
pub fn hand_instance() -> Vec<StudyEval> {
    let gt = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0);
    let det = |x: f64, score: f64| Detection { bbox: gt(x), score };
    vec![
        StudyEval {
            study_id: "A".into(),
            detections: vec![det(0.0, 0.9), det(20.0, 0.8), det(60.0, 0.7)],
            gts: vec![gt(0.0), gt(20.0)],
        },
        StudyEval {
            study_id: "B".into(),
            detections: vec![det(40.0, 0.6), det(60.0, 0.5)],
            gts: vec![gt(0.0)],
        },
        StudyEval {
            study_id: "C".into(),
            detections: vec![det(0.0, 0.4)],
            gts: vec![gt(0.0)],
        },
    ]
}

/// Worst element-wise relative error between an analytic gradient and
/// central differences of `f`, skipping elements where both are below
/// `floor` in magnitude.
pub fn max_rel_fd_error(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}
