//! Supervised pretraining and mean-teacher fine-tuning.
//!
//! Each phase draws from its own named random streams: labeled batches and
//! their sequence subsets never share a stream with the unlabeled branch, so
//! switching the consistency term off leaves the labeled trajectory intact.

mod checkpoint;
mod fit;
mod inference;
mod splits;

use std::path::PathBuf;

use ndarray::Array2;
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_geometric_to_image, apply_intensity, sample_augment, sample_subset, warp_teacher_outputs,
    AugmentRanges,
};
use crate::dataset::Study;
use crate::error::{Error, Result};
use crate::heatmap_codec::{DecodeConfig, TargetMaps};
use crate::hetero_net::{HeteroNet, Params, SequenceImages};
use crate::losses::{consistency_loss, sup_loss, ConsLoss, ConsLossConfig, SupLoss, SupLossConfig};
use crate::optim::Adam;
use crate::rng::Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use fit::{fit, fit_dataset, FitOutcome, LossSummary, MetricRecord, Trainer, ValMetrics};
pub use inference::{evaluate_studies, predict_study};
pub use splits::{assign_splits, SplitConfig, Splits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Supervised,
    Ssl,
}

/// Which parameter set is evaluated and exported for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    #[default]
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr_supervised: f64,
    pub lr_ssl: f64,
    pub weight_decay: f64,
    /// Optimizer steps of the supervised phase. Full-scale runs used 30
    /// epochs at batch 30 (supervised) and batch 12 (ssl).
    pub steps: usize,
    pub ssl_steps: usize,
    /// Labeled studies per step; the unlabeled count follows from the ratio.
    pub batch_size: usize,
    /// Labeled : unlabeled studies per ssl batch.
    pub ratio: (usize, usize),
    pub ema_alpha: f64,
    pub lambda_unsup: f64,
    pub consistency: ConsLossConfig,
    pub sup_loss: SupLossConfig,
    pub augment: AugmentRanges,
    /// Sampling weight of lesion-bearing vs lesion-free labeled studies.
    pub lesion_weight: f64,
    /// Include unlabeled studies that miss sequences.
    pub use_incomplete: bool,
    /// Fraction of the training labels kept; the rest train as unlabeled.
    pub labeled_fraction: f64,
    pub split: SplitConfig,
    /// Validation period in steps; 0 evaluates only at the start and end.
    pub eval_every: usize,
    pub eval_target: EvalTarget,
    pub decode: DecodeConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Supervised,
            lr_supervised: 1.25e-4,
            lr_ssl: 5e-5,
            weight_decay: 1e-5,
            steps: 2000,
            ssl_steps: 2000,
            batch_size: 4,
            ratio: (1, 1),
            ema_alpha: 0.999,
            lambda_unsup: 0.02,
            consistency: ConsLossConfig::default(),
            sup_loss: SupLossConfig::default(),
            augment: AugmentRanges::default(),
            lesion_weight: 2.0,
            use_incomplete: true,
            labeled_fraction: 1.0,
            split: SplitConfig::default(),
            eval_every: 250,
            eval_target: EvalTarget::Teacher,
            decode: DecodeConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if !(self.lambda_unsup >= 0.0 && self.consistency.lambda_size >= 0.0) {
            return bad("consistency weights must be non-negative".into());
        }
        if self.ratio.0 == 0 || self.ratio.1 == 0 {
            return bad("labeled:unlabeled ratio must be positive".into());
        }
        if self.batch_size == 0 || !(self.batch_size * self.ratio.1).is_multiple_of(self.ratio.0) {
            return bad(format!(
                "batch size {} does not honor ratio {}:{}",
                self.batch_size, self.ratio.0, self.ratio.1
            ));
        }
        if !(self.lr_supervised > 0.0 && self.lr_ssl > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive, weight decay non-negative".into());
        }
        if self.lesion_weight.is_nan() || self.lesion_weight <= 0.0 {
            return bad("lesion_weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return bad(format!(
                "labeled_fraction {} outside [0, 1]",
                self.labeled_fraction
            ));
        }
        self.sup_loss.validate()?;
        self.split.validate()
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.batch_size * self.ratio.1 / self.ratio.0
    }

    pub fn phase_steps(&self) -> usize {
        match self.phase {
            Phase::Supervised => self.steps,
            Phase::Ssl => self.ssl_steps,
        }
    }

    pub fn lr(&self) -> f64 {
        match self.phase {
            Phase::Supervised => self.lr_supervised,
            Phase::Ssl => self.lr_ssl,
        }
    }
}

/// Student and EMA teacher parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentState {
    pub student: Params,
    pub teacher: Params,
    pub step: u64,
}

impl TeacherStudentState {
    /// Both copies start from the same pretrained weights.
    pub fn from_pretrained(params: Params) -> Self {
        Self {
            teacher: params.clone(),
            student: params,
            step: 0,
        }
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_slice<F: Float>(teacher: &mut [F], student: &[F], alpha: F) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!(
            "ema over {} vs {} values",
            teacher.len(),
            student.len()
        )));
    }
    let beta = F::one() - alpha;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + beta * *s;
    }
    Ok(())
}

pub fn ema_update(state: &mut TeacherStudentState, alpha: f64) -> Result<()> {
    if !state.teacher.same_structure(&state.student) {
        return Err(Error::ShapeMismatch(
            "teacher and student differ in structure".into(),
        ));
    }
    let student = state.student.tensors();
    for (t, (_, s)) in state.teacher.tensors_mut().into_iter().zip(student) {
        ema_slice(t, s, alpha as f32)?;
    }
    Ok(())
}

/// A labeled study with its precomputed training targets.
#[derive(Debug, Clone, Copy)]
pub struct LabeledItem<'a> {
    pub study: &'a Study,
    pub targets: &'a TargetMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Batch means.
    pub sup: SupLoss,
    pub cons: Option<ConsLoss>,
    /// `sup.total + lambda_unsup * cons.total`.
    pub total: f64,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && [self.sup.heatmap, self.sup.size, self.sup.offset]
                .iter()
                .all(|v| v.is_finite())
            && self
                .cons
                .is_none_or(|c| c.heatmap.is_finite() && c.size.is_finite())
    }
}

fn select(study: &Study, names: &[String]) -> Result<SequenceImages> {
    names
        .iter()
        .map(|n| {
            study
                .sequences
                .get(n)
                .map(|img| (n.clone(), img.clone()))
                .ok_or_else(|| {
                    Error::UnknownSequence(format!("{n} not in study {}", study.study_id))
                })
        })
        .collect()
}

fn available(study: &Study) -> Vec<String> {
    study.sequences.keys().cloned().collect()
}

/// Forward/backward over the labeled half; gradients of the batch-mean loss
/// are added to `acc`.
fn labeled_pass(
    net: &HeteroNet,
    params: &Params,
    batch: &[LabeledItem],
    cfg: &TrainConfig,
    rng: &mut Rng,
    acc: &mut Params,
) -> Result<SupLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("labeled batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut mean = SupLoss {
        total: 0.0,
        heatmap: 0.0,
        size: 0.0,
        offset: 0.0,
    };
    for item in batch {
        let avail = available(item.study);
        let subset = if cfg.augment.sequence_subsets {
            sample_subset(&avail, rng)?
        } else {
            avail
        };
        let images = select(item.study, &subset)?;
        let (out, trace) = net.forward_train(params, &images)?;
        let (loss, mut grads) = sup_loss(&out, item.targets, &cfg.sup_loss)?;
        grads.scale(scale as f32);
        net.backward(params, &trace, &out, &grads, acc)?;
        mean.total += scale * loss.total;
        mean.heatmap += scale * loss.heatmap;
        mean.size += scale * loss.size;
        mean.offset += scale * loss.offset;
    }
    Ok(mean)
}

/// Strong student view and weak teacher view of one unlabeled study.
fn consistency_pass(
    net: &HeteroNet,
    state: &TeacherStudentState,
    study: &Study,
    cfg: &TrainConfig,
    rng: &mut Rng,
    weight: f32,
    acc: &mut Params,
) -> Result<ConsLoss> {
    let (h, w) = study.shape().ok_or(Error::NoSequences)?;
    let spec = sample_augment(&available(study), h, w, rng, &cfg.augment)?;
    let mut student_in = SequenceImages::new();
    let mut teacher_in = SequenceImages::new();
    for name in &spec.sequence_subset {
        let img = &study.sequences[name];
        let warped: Array2<f32> = apply_geometric_to_image(img.view(), &spec.geom);
        student_in.insert(
            name.clone(),
            apply_intensity(warped.view(), spec.gamma_student)?,
        );
        teacher_in.insert(
            name.clone(),
            apply_intensity(img.view(), spec.gamma_teacher)?,
        );
    }
    let teacher_out = net.forward(&state.teacher, &teacher_in)?;
    let (t_heat, t_size) = warp_teacher_outputs(
        teacher_out.heatmap.view(),
        teacher_out.size.view(),
        &spec.geom,
        net.config().stride,
        cfg.augment.rescale_size_values,
    );
    let (out, trace) = net.forward_train(&state.student, &student_in)?;
    let (loss, mut grads) = consistency_loss(&out, t_heat.view(), t_size.view(), &cfg.consistency)?;
    grads.scale(weight);
    net.backward(&state.student, &trace, &out, &grads, acc)?;
    Ok(loss)
}

/// One supervised update: a random sequence subset per study, the detection
/// loss averaged over the batch, one optimizer step.
pub fn supervised_step(
    net: &HeteroNet,
    batch: &[LabeledItem],
    params: &mut Params,
    opt: &mut Adam,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let mut acc = params.zeros_like();
    let sup = labeled_pass(net, params, batch, cfg, rng, &mut acc)?;
    opt.apply(params, &acc);
    Ok(StepLosses {
        sup,
        cons: None,
        total: sup.total,
    })
}

/// One mean-teacher update. The labeled half is processed exactly as in
/// [`supervised_step`]; each unlabeled study adds `lambda_unsup / n` times
/// its consistency gradient. The optimizer moves the student, then the
/// teacher follows by EMA.
#[allow(clippy::too_many_arguments)]
pub fn ssl_step(
    net: &HeteroNet,
    labeled: &[LabeledItem],
    unlabeled: &[&Study],
    state: &mut TeacherStudentState,
    opt: &mut Adam,
    cfg: &TrainConfig,
    rng_labeled: &mut Rng,
    rng_unlabeled: &mut Rng,
) -> Result<StepLosses> {
    let mut acc = state.student.zeros_like();
    let sup = labeled_pass(net, &state.student, labeled, cfg, rng_labeled, &mut acc)?;
    let cons = if unlabeled.is_empty() {
        None
    } else {
        let n = unlabeled.len() as f64;
        let weight = (cfg.lambda_unsup / n) as f32;
        let mut mean = ConsLoss {
            total: 0.0,
            heatmap: 0.0,
            size: 0.0,
        };
        for study in unlabeled {
            let l = consistency_pass(net, state, study, cfg, rng_unlabeled, weight, &mut acc)?;
            mean.total += l.total / n;
            mean.heatmap += l.heatmap / n;
            mean.size += l.size / n;
        }
        Some(mean)
    };
    opt.apply(&mut state.student, &acc);
    ema_update(state, cfg.ema_alpha)?;
    state.step += 1;
    Ok(StepLosses {
        sup,
        cons,
        total: sup.total + cons.map_or(0.0, |c| cfg.lambda_unsup * c.total),
    })
}

/// Draws labeled indices with replacement, favoring lesion-bearing studies
/// by `lesion_weight : 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSampler {
    lesion: Vec<usize>,
    empty: Vec<usize>,
    p_lesion: f64,
}

impl LabeledSampler {
    pub fn new(has_lesion: &[bool], lesion_weight: f64) -> Result<Self> {
        if has_lesion.is_empty() {
            return Err(Error::Empty("labeled training set".into()));
        }
        let (lesion, empty): (Vec<usize>, Vec<usize>) =
            (0..has_lesion.len()).partition(|&i| has_lesion[i]);
        let p_lesion = match (lesion.is_empty(), empty.is_empty()) {
            (true, _) => 0.0,
            (_, true) => 1.0,
            _ => lesion_weight / (lesion_weight + 1.0),
        };
        Ok(Self {
            lesion,
            empty,
            p_lesion,
        })
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let pool = if rng.random_bool(self.p_lesion) {
                    &self.lesion
                } else {
                    &self.empty
                };
                pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

pub fn sample_unlabeled(n_pool: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if n_pool == 0 {
        return Vec::new();
    }
    (0..n).map(|_| rng.random_range(0..n_pool)).collect()
}
