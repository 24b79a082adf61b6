//! Per-patient FROC: sensitivity at fixed false-positives-per-study operating
//! points, with a detection counted as a hit when IoU with an unmatched
//! ground-truth box is strictly greater than the threshold.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::heatmap_codec::Detection;

pub const FP_POINTS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const IOU_THRESHOLD: f64 = 0.5;
pub const EVAL_SCHEMA_VERSION: u32 = 1;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Detection indices by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Aligned with the input detections.
    pub tp_flags: Vec<bool>,
    pub matched_gt_count: usize,
}

/// Greedy matching in descending score order; each ground truth is consumed
/// by at most one detection.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut used = vec![false; gts.len()];
    let mut tp_flags = vec![false; dets.len()];
    for d in score_order(dets) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[*g])
            .map(|(g, gt)| (g, iou(&dets[d].bbox, gt)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, v)) = best {
            if v > iou_thr {
                used[g] = true;
                tp_flags[d] = true;
            }
        }
    }
    MatchResult {
        tp_flags,
        matched_gt_count: used.iter().filter(|&&u| u).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Hits over all lesions pooled across studies.
    #[default]
    LesionPooled,
    /// Mean of per-study hit rates over studies that have lesions.
    PerStudyMean,
}

/// Predictions and ground truth for one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEval {
    pub study_id: String,
    pub detections: Vec<Detection>,
    pub gts: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub mean_fp: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMatch {
    pub study_id: String,
    pub n_gt: usize,
    pub scores: Vec<f64>,
    pub tp_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fp_points: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub average: f64,
    /// Operating points from the strictest threshold down; empty after
    /// fold aggregation.
    pub curve: Vec<FrocPoint>,
    pub per_study: Vec<StudyMatch>,
}

impl EvalResult {
    pub fn table(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<28}", "Method");
        for p in &self.fp_points {
            let _ = write!(s, "{:>7}", p);
        }
        let _ = writeln!(s, "{:>8}", "Avg.");
        let _ = write!(s, "{label:<28}");
        for v in &self.sensitivities {
            let _ = write!(s, "{:>7.1}", 100.0 * v);
        }
        let _ = writeln!(s, "{:>8.1}", 100.0 * self.average);
        s
    }
}

pub fn froc(studies: &[StudyEval], fp_points: &[f64], mode: SensitivityMode) -> Result<EvalResult> {
    let total_gt: usize = studies.iter().map(|s| s.gts.len()).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let n_studies = studies.len() as f64;
    let with_gt = studies.iter().filter(|s| !s.gts.is_empty()).count() as f64;

    // (score, study, rank within study, is_tp)
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut per_study = Vec::with_capacity(studies.len());
    for (s, st) in studies.iter().enumerate() {
        let m = match_detections(&st.detections, &st.gts, IOU_THRESHOLD);
        for (rank, d) in score_order(&st.detections).into_iter().enumerate() {
            pooled.push((st.detections[d].score, s, rank, m.tp_flags[d]));
        }
        per_study.push(StudyMatch {
            study_id: st.study_id.clone(),
            n_gt: st.gts.len(),
            scores: st.detections.iter().map(|d| d.score).collect(),
            tp_flags: m.tp_flags,
        });
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut tp_per_study = vec![0usize; studies.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let sensitivity = |tp: usize, tps: &[usize]| -> f64 {
        match mode {
            SensitivityMode::LesionPooled => tp as f64 / total_gt as f64,
            SensitivityMode::PerStudyMean => {
                studies
                    .iter()
                    .zip(tps)
                    .filter(|(s, _)| !s.gts.is_empty())
                    .map(|(s, &t)| t as f64 / s.gts.len() as f64)
                    .sum::<f64>()
                    / with_gt
            }
        }
    };
    let mut curve = vec![FrocPoint {
        threshold: f64::INFINITY,
        mean_fp: 0.0,
        sensitivity: 0.0,
    }];
    let mut k = 0;
    while k < pooled.len() {
        let score = pooled[k].0;
        while k < pooled.len() && pooled[k].0 == score {
            let (_, s, _, hit) = pooled[k];
            if hit {
                tp += 1;
                tp_per_study[s] += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push(FrocPoint {
            threshold: score,
            mean_fp: fp as f64 / n_studies,
            sensitivity: sensitivity(tp, &tp_per_study),
        });
    }

    let sensitivities: Vec<f64> = fp_points
        .iter()
        .map(|&p| {
            curve
                .iter()
                .filter(|c| c.mean_fp <= p)
                .map(|c| c.sensitivity)
                .fold(0.0, f64::max)
        })
        .collect();
    let average = sensitivities.iter().sum::<f64>() / sensitivities.len().max(1) as f64;
    Ok(EvalResult {
        fp_points: fp_points.to_vec(),
        sensitivities,
        average,
        curve,
        per_study,
    })
}

/// Mean over folds of each operating point and of the averages.
pub fn aggregate_folds(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Empty("no folds to aggregate".into()))?;
    if results.iter().any(|r| r.fp_points != first.fp_points) {
        return Err(Error::ShapeMismatch("folds use different FP points".into()));
    }
    let n = results.len() as f64;
    let sensitivities = (0..first.fp_points.len())
        .map(|i| results.iter().map(|r| r.sensitivities[i]).sum::<f64>() / n)
        .collect();
    let average = results.iter().map(|r| r.average).sum::<f64>() / n;
    Ok(EvalResult {
        fp_points: first.fp_points.clone(),
        sensitivities,
        average,
        curve: if results.len() == 1 {
            first.curve.clone()
        } else {
            Vec::new()
        },
        per_study: results.iter().flat_map(|r| r.per_study.clone()).collect(),
    })
}

/// Per-study detections as `[x_min, y_min, x_max, y_max, score]` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub studies: Vec<StudyPredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPredictions {
    pub study_id: String,
    pub detections: Vec<[f64; 5]>,
}

impl StudyPredictions {
    pub fn new(study_id: impl Into<String>, dets: &[Detection]) -> Self {
        Self {
            study_id: study_id.into(),
            detections: dets
                .iter()
                .map(|d| {
                    [
                        d.bbox.x_min,
                        d.bbox.y_min,
                        d.bbox.x_max,
                        d.bbox.y_max,
                        d.score,
                    ]
                })
                .collect(),
        }
    }

    pub fn to_detections(&self) -> Vec<Detection> {
        self.detections
            .iter()
            .map(|r| Detection {
                bbox: BBox::new(r[0], r[1], r[2], r[3]),
                score: r[4],
            })
            .collect()
    }
}

impl PredictionFile {
    pub fn new(studies: Vec<StudyPredictions>) -> Self {
        Self {
            schema_version: EVAL_SCHEMA_VERSION,
            studies,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = crate::dataset::read_json(path)?;
        if f.schema_version != EVAL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: f.schema_version,
                expected: EVAL_SCHEMA_VERSION,
            });
        }
        Ok(f)
    }
}

/// The five-point table plus the curve, as written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub labeled_fraction: Option<f64>,
    pub fp_points: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub average: f64,
    pub curve: Vec<FrocPoint>,
}

impl EvalReport {
    pub fn new(label: impl Into<String>, labeled_fraction: Option<f64>, r: &EvalResult) -> Self {
        Self {
            schema_version: EVAL_SCHEMA_VERSION,
            label: label.into(),
            labeled_fraction,
            fp_points: r.fp_points.clone(),
            sensitivities: r.sensitivities.clone(),
            average: r.average,
            curve: r
                .curve
                .iter()
                .filter(|c| c.threshold.is_finite())
                .copied()
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::dataset::read_json(path)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
