use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalTarget, Phase, TeacherStudentState, TrainConfig};
use crate::error::{Error, Result};
use crate::hetero_net::{ModelConfig, Params, TensorRecord};
use crate::optim::{Adam, AdamState};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub phase: Phase,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub student: Vec<TensorRecord>,
    /// Present for ssl checkpoints.
    pub teacher: Option<Vec<TensorRecord>>,
    pub optimizer: AdamState,
    /// Validation average sensitivity of the exported parameters.
    pub val_average: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        model: &ModelConfig,
        train: &TrainConfig,
        state: &TeacherStudentState,
        opt: &Adam,
        val_average: Option<f64>,
    ) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            phase: train.phase,
            step: state.step,
            model: model.clone(),
            train: train.clone(),
            student: state.student.to_records(),
            teacher: (train.phase == Phase::Ssl).then(|| state.teacher.to_records()),
            optimizer: opt.state(),
            val_average,
        }
    }

    pub fn student(&self) -> Result<Params> {
        Params::from_records(&self.model, &self.student)
    }

    pub fn teacher(&self) -> Result<Option<Params>> {
        self.teacher
            .as_ref()
            .map(|t| Params::from_records(&self.model, t))
            .transpose()
    }

    /// The teacher when present and configured as the evaluation target,
    /// otherwise the student.
    pub fn inference_params(&self) -> Result<Params> {
        match (self.teacher()?, self.train.eval_target) {
            (Some(t), EvalTarget::Teacher) => Ok(t),
            _ => self.student(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = crate::dataset::read_json(path)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: ck.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        // surface structural problems at load time
        ck.student()?;
        ck.teacher()?;
        Ok(ck)
    }
}
