use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{
    assign_splits, evaluate_studies, ssl_step, supervised_step, Checkpoint, EvalTarget,
    LabeledItem, LabeledSampler, Phase, Splits, StepLosses, TeacherStudentState, TrainConfig,
};
use crate::dataset::{load_dataset, Study};
use crate::error::{Error, Result};
use crate::froc_eval::{EvalResult, SensitivityMode};
use crate::heatmap_codec::{encode, TargetMaps};
use crate::hetero_net::{HeteroNet, ModelConfig, Params};
use crate::optim::Adam;
use crate::rng::{stream, Rng, Stream};

/// Mean losses since the previous record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub total: f64,
    pub heatmap: f64,
    pub size: f64,
    pub offset: f64,
    pub cons_heatmap: Option<f64>,
    pub cons_size: Option<f64>,
}

impl LossSummary {
    fn add(&mut self, l: &StepLosses) {
        self.steps += 1;
        self.total += l.total;
        self.heatmap += l.sup.heatmap;
        self.size += l.sup.size;
        self.offset += l.sup.offset;
        if let Some(c) = l.cons {
            *self.cons_heatmap.get_or_insert(0.0) += c.heatmap;
            *self.cons_size.get_or_insert(0.0) += c.size;
        }
    }

    fn mean(mut self) -> Option<Self> {
        if self.steps == 0 {
            return None;
        }
        let n = self.steps as f64;
        for v in [
            &mut self.total,
            &mut self.heatmap,
            &mut self.size,
            &mut self.offset,
        ] {
            *v /= n;
        }
        for v in [&mut self.cons_heatmap, &mut self.cons_size]
            .into_iter()
            .flatten()
        {
            *v /= n;
        }
        Some(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub sensitivities: Vec<f64>,
    pub average: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub losses: Option<LossSummary>,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Highest validation average (the initial weights included); equals
    /// `last` when there is no usable validation split.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<MetricRecord>,
    pub splits: Splits,
}

/// Owns the data, parameters and random streams of one training run.
pub struct Trainer {
    net: HeteroNet,
    model: ModelConfig,
    cfg: TrainConfig,
    studies: Vec<Study>,
    targets: Vec<TargetMaps>,
    splits: Splits,
    sampler: LabeledSampler,
    state: TeacherStudentState,
    opt: Adam,
    batch_labeled: Rng,
    batch_unlabeled: Rng,
    augment_labeled: Rng,
    augment_unlabeled: Rng,
}

impl Trainer {
    /// Ssl runs must start from `init`; supervised runs start from it when
    /// given and from a seeded initialization otherwise.
    pub fn new(
        model: &ModelConfig,
        cfg: &TrainConfig,
        studies: Vec<Study>,
        init: Option<&Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = HeteroNet::new(model.clone())?;
        if let Some(ck) = init {
            if &ck.model != model {
                return Err(Error::InvalidConfig(
                    "model configuration differs from the initial checkpoint".into(),
                ));
            }
        }
        let params = match (cfg.phase, init) {
            (Phase::Ssl, None) => return Err(Error::MissingCheckpoint),
            (_, Some(ck)) => ck.inference_params()?,
            (Phase::Supervised, None) => net.init_params(&mut stream(cfg.seed, Stream::Init))?,
        };

        let splits = assign_splits(
            &studies,
            &cfg.split,
            cfg.labeled_fraction,
            cfg.use_incomplete,
        )?;
        if splits.train_labeled.is_empty() {
            return Err(Error::Empty("no labeled training studies".into()));
        }
        let mut targets = Vec::with_capacity(studies.len());
        for s in &studies {
            let (h, w) = s.shape().ok_or(Error::NoSequences)?;
            let boxes = s.boxes.as_deref().unwrap_or(&[]);
            targets.push(encode(boxes, h, w, model.stride)?);
        }
        let has_lesion: Vec<bool> = splits
            .train_labeled
            .iter()
            .map(|&i| studies[i].has_lesions())
            .collect();
        let sampler = LabeledSampler::new(&has_lesion, cfg.lesion_weight)?;
        let opt = Adam::new(&params, cfg.lr(), cfg.weight_decay);
        let seed = cfg.seed;
        Ok(Self {
            net,
            model: model.clone(),
            cfg: cfg.clone(),
            studies,
            targets,
            splits,
            sampler,
            state: TeacherStudentState::from_pretrained(params),
            opt,
            batch_labeled: stream(seed, Stream::BatchLabeled),
            batch_unlabeled: stream(seed, Stream::BatchUnlabeled),
            augment_labeled: stream(seed, Stream::AugmentLabeled),
            augment_unlabeled: stream(seed, Stream::AugmentUnlabeled),
        })
    }

    pub fn state(&self) -> &TeacherStudentState {
        &self.state
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn net(&self) -> &HeteroNet {
        &self.net
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    /// Parameters used for validation and export.
    pub fn eval_params(&self) -> &Params {
        match (self.cfg.phase, self.cfg.eval_target) {
            (Phase::Ssl, EvalTarget::Teacher) => &self.state.teacher,
            _ => &self.state.student,
        }
    }

    pub fn step(&mut self) -> Result<StepLosses> {
        let picks = self
            .sampler
            .sample(self.cfg.batch_size, &mut self.batch_labeled);
        let batch: Vec<LabeledItem> = picks
            .iter()
            .map(|&p| {
                let i = self.splits.train_labeled[p];
                LabeledItem {
                    study: &self.studies[i],
                    targets: &self.targets[i],
                }
            })
            .collect();
        let losses = match self.cfg.phase {
            Phase::Supervised => {
                let l = supervised_step(
                    &self.net,
                    &batch,
                    &mut self.state.student,
                    &mut self.opt,
                    &self.cfg,
                    &mut self.augment_labeled,
                )?;
                self.state.step += 1;
                l
            }
            Phase::Ssl => {
                let pool = &self.splits.train_unlabeled;
                let unlabeled: Vec<&Study> = super::sample_unlabeled(
                    pool.len(),
                    self.cfg.unlabeled_batch(),
                    &mut self.batch_unlabeled,
                )
                .into_iter()
                .map(|p| &self.studies[pool[p]])
                .collect();
                ssl_step(
                    &self.net,
                    &batch,
                    &unlabeled,
                    &mut self.state,
                    &mut self.opt,
                    &self.cfg,
                    &mut self.augment_labeled,
                    &mut self.augment_unlabeled,
                )?
            }
        };
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step as usize,
                detail: format!("{losses:?}"),
            });
        }
        Ok(losses)
    }

    /// `None` when the validation split has no lesions to find.
    pub fn validate(&self) -> Result<Option<EvalResult>> {
        let val: Vec<&Study> = self.splits.val.iter().map(|&i| &self.studies[i]).collect();
        if !val.iter().any(|s| s.has_lesions()) {
            return Ok(None);
        }
        evaluate_studies(
            &self.net,
            self.eval_params(),
            &val,
            None,
            self.cfg.decode,
            SensitivityMode::LesionPooled,
        )
        .map(Some)
    }

    pub fn checkpoint(&self, val_average: Option<f64>) -> Checkpoint {
        Checkpoint::new(&self.model, &self.cfg, &self.state, &self.opt, val_average)
    }

    /// Trains for the configured number of steps, validating periodically,
    /// and writes checkpoints and the log when paths are configured.
    pub fn run(mut self) -> Result<FitOutcome> {
        let mut log_file = match &self.cfg.log_path {
            Some(p) => Some(open_log(p)?),
            None => None,
        };
        let mut log = Vec::new();
        let mut best: Option<Checkpoint> = None;
        let mut window = LossSummary::default();
        let steps = self.cfg.phase_steps();
        for step in 0..=steps {
            if step > 0 {
                let l = self.step()?;
                window.add(&l);
            }
            let due = step == 0
                || step == steps
                || (self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0);
            if !due {
                continue;
            }
            let val = self.validate()?.map(|r| ValMetrics {
                sensitivities: r.sensitivities,
                average: r.average,
            });
            let record = MetricRecord {
                step: self.state.step,
                phase: self.cfg.phase,
                losses: std::mem::take(&mut window).mean(),
                val,
            };
            info!(
                "step {} loss {:?} val {:?}",
                record.step,
                record.losses.map(|l| l.total),
                record.val.as_ref().map(|v| v.average)
            );
            if let Some(avg) = record.val.as_ref().map(|v| v.average) {
                if best
                    .as_ref()
                    .is_none_or(|b| b.val_average.is_none_or(|x| avg > x))
                {
                    best = Some(self.checkpoint(Some(avg)));
                }
            }
            if let Some(f) = log_file.as_mut() {
                write_record(f, &record, self.cfg.log_path.as_deref().expect("log path"))?;
            }
            log.push(record);
        }
        let last_val = log.last().and_then(|r| r.val.as_ref()).map(|v| v.average);
        let last = self.checkpoint(last_val);
        let best = best.unwrap_or_else(|| last.clone());
        if let Some(dir) = &self.cfg.checkpoint_dir {
            best.save(&dir.join("best.json"))?;
            last.save(&dir.join("last.json"))?;
        }
        Ok(FitOutcome {
            best,
            last,
            log,
            splits: self.splits,
        })
    }
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_record(f: &mut BufWriter<File>, record: &MetricRecord, path: &Path) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::parse(path, e))?;
    writeln!(f, "{line}")
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn fit(
    model: &ModelConfig,
    cfg: &TrainConfig,
    studies: Vec<Study>,
    init: Option<&Checkpoint>,
) -> Result<FitOutcome> {
    Trainer::new(model, cfg, studies, init)?.run()
}

/// [`fit`] on a dataset directory.
pub fn fit_dataset(
    model: &ModelConfig,
    cfg: &TrainConfig,
    root: &Path,
    init: Option<&Checkpoint>,
) -> Result<FitOutcome> {
    let (studies, _) = load_dataset(root)?;
    fit(model, cfg, studies, init)
}
