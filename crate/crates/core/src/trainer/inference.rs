use crate::dataset::Study;
use crate::error::{Error, Result};
use crate::froc_eval::{froc, EvalResult, SensitivityMode, StudyEval, FP_POINTS};
use crate::heatmap_codec::{decode, DecodeConfig, Detection};
use crate::hetero_net::{HeteroNet, Params, SequenceImages};

/// Detections for one study from all of its sequences, or from those also
/// listed in `only`.
pub fn predict_study(
    net: &HeteroNet,
    params: &Params,
    study: &Study,
    only: Option<&[String]>,
    cfg: DecodeConfig,
) -> Result<Vec<Detection>> {
    let images: SequenceImages = study
        .sequences
        .iter()
        .filter(|(name, _)| only.is_none_or(|o| o.contains(name)))
        .map(|(n, img)| (n.clone(), img.clone()))
        .collect();
    if images.is_empty() {
        return Err(Error::NoSequences);
    }
    let out = net.forward(params, &images)?;
    decode(
        out.heatmap.view(),
        out.size.view(),
        out.offset.view(),
        net.config().stride,
        cfg,
    )
}

/// Predicts every study and scores the pooled FROC at the standard points.
pub fn evaluate_studies(
    net: &HeteroNet,
    params: &Params,
    studies: &[&Study],
    only: Option<&[String]>,
    cfg: DecodeConfig,
    mode: SensitivityMode,
) -> Result<EvalResult> {
    let evals = studies
        .iter()
        .map(|s| {
            let gts = s.boxes.clone().ok_or_else(|| {
                Error::Invariant(format!("study {} has no annotations", s.study_id))
            })?;
            Ok(StudyEval {
                study_id: s.study_id.clone(),
                detections: predict_study(net, params, s, only, cfg)?,
                gts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    froc(&evals, &FP_POINTS, mode)
}
