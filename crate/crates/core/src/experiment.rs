//! One configuration file for every command, and the ablation runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSpec, Study};
use crate::error::{Error, Result};
use crate::froc_eval::{aggregate_folds, EvalResult, SensitivityMode};
use crate::hetero_net::{HeteroNet, ModelConfig, Params};
use crate::trainer::{evaluate_studies, fit, Checkpoint, Phase, Splits, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate_for(self.dataset.stride)?;
        if self.model.sequences != self.dataset.sequence_names() {
            return Err(Error::InvalidConfig(
                "model sequences must match the dataset's canonical sequences".into(),
            ));
        }
        self.train.validate()
    }
}

/// Rows of the ablation table. Every ssl row starts from the same supervised
/// checkpoint of its seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The supervised initialization itself.
    Supervised,
    /// Heatmap consistency under intensity and sequence-subset transforms.
    IntensityOnly,
    /// Adds geometric transforms of the student input.
    Geometric,
    /// Adds size consistency.
    Full,
    /// Full, without unlabeled studies that miss sequences.
    WithoutIncomplete,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Supervised,
        Variant::IntensityOnly,
        Variant::Geometric,
        Variant::Full,
        Variant::WithoutIncomplete,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Supervised => "supervised",
            Variant::IntensityOnly => "+ center consistency (int.)",
            Variant::Geometric => "+ geometric",
            Variant::Full => "MTHD",
            Variant::WithoutIncomplete => "MTHD w/o incomplete",
        }
    }

    /// The ssl training configuration of this row, or `None` for the
    /// supervised row.
    pub fn ssl_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        c.phase = Phase::Ssl;
        match self {
            Variant::Supervised => return None,
            Variant::IntensityOnly => {
                c.augment.geometric = false;
                c.consistency.lambda_size = 0.0;
            }
            Variant::Geometric => c.consistency.lambda_size = 0.0,
            Variant::Full => {}
            Variant::WithoutIncomplete => c.use_incomplete = false,
        }
        Some(c)
    }
}

/// Which checkpoint of an ssl row is scored on the test split. The
/// supervised row always uses its best-on-validation checkpoint, which is
/// also where every ssl row of its seed starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslSelection {
    BestOnValidation,
    /// The weights at the end of the run (the teacher by default).
    #[default]
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Training seeds; data and splits stay fixed.
    pub seeds: Vec<u64>,
    pub sensitivity_mode: SensitivityMode,
    pub ssl_selection: SslSelection,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
            sensitivity_mode: SensitivityMode::LesionPooled,
            ssl_selection: SslSelection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Held-out test split.
    pub test: EvalResult,
    pub val_average: Option<f64>,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    /// Per-variant means over seeds, in first-appearance order.
    pub fn summary(&self) -> Result<Vec<(Variant, EvalResult)>> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let runs: Vec<EvalResult> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| r.test.clone())
                    .collect();
                Ok((v, aggregate_folds(&runs)?))
            })
            .collect()
    }

    /// Sensitivities in percent at each FP point, averaged over seeds.
    pub fn render(&self) -> Result<String> {
        let summary = self.summary()?;
        let mut s = String::new();
        let Some((_, first)) = summary.first() else {
            return Ok(s);
        };
        let _ = write!(s, "{:<30}", "FPs per study");
        for p in &first.fp_points {
            let _ = write!(s, "{p:>7}");
        }
        let _ = writeln!(s, "{:>8}", "Avg.");
        for (v, r) in &summary {
            let _ = write!(s, "{:<30}", v.label());
            for x in &r.sensitivities {
                let _ = write!(s, "{:>7.1}", 100.0 * x);
            }
            let _ = writeln!(s, "{:>8.1}", 100.0 * r.average);
        }
        Ok(s)
    }
}

pub fn evaluate_indices(
    model: &ModelConfig,
    params: &Params,
    studies: &[Study],
    idx: &[usize],
    train: &TrainConfig,
    mode: SensitivityMode,
) -> Result<EvalResult> {
    let net = HeteroNet::new(model.clone())?;
    let set: Vec<&Study> = idx.iter().map(|&i| &studies[i]).collect();
    evaluate_studies(&net, params, &set, None, train.decode, mode)
}

fn with_outputs(mut c: TrainConfig, out: Option<&Path>, seed: u64, name: &str) -> TrainConfig {
    c.seed = seed;
    if let Some(dir) = out {
        let d: PathBuf = dir.join(format!("seed{seed}")).join(name);
        c.log_path = Some(d.join("metrics.jsonl"));
        c.checkpoint_dir = Some(d);
    }
    c
}

fn row(
    cfg: &ExperimentConfig,
    studies: &[Study],
    variant: Variant,
    seed: u64,
    scored: &Checkpoint,
    splits: &Splits,
) -> Result<AblationRow> {
    let params = scored.inference_params()?;
    let test = evaluate_indices(
        &cfg.model,
        &params,
        studies,
        &splits.test,
        &cfg.train,
        cfg.ablation.sensitivity_mode,
    )?;
    Ok(AblationRow {
        variant,
        seed,
        test,
        val_average: scored.val_average,
        checkpoint: scored.clone(),
    })
}

/// Trains the supervised initialization and every requested ssl variant for
/// each seed, and scores each row on the test split (see [`SslSelection`]).
/// `progress` is called after each finished row.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    studies: &[Study],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    cfg.train.validate()?;
    if cfg.ablation.variants.is_empty() || cfg.ablation.seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs variants and seeds".into(),
        ));
    }
    let mut table = AblationTable::default();
    for &seed in &cfg.ablation.seeds {
        let mut sup_cfg = with_outputs(cfg.train.clone(), out_dir, seed, "supervised");
        sup_cfg.phase = Phase::Supervised;
        let sup = fit(&cfg.model, &sup_cfg, studies.to_vec(), None)?;
        let sup_row = row(
            cfg,
            studies,
            Variant::Supervised,
            seed,
            &sup.best,
            &sup.splits,
        )?;
        if cfg.ablation.variants.contains(&Variant::Supervised) {
            progress(&sup_row);
            table.rows.push(sup_row);
        }
        for &v in &cfg.ablation.variants {
            let Some(c) = v.ssl_config(&cfg.train) else {
                continue;
            };
            let name = format!("{v:?}").to_lowercase();
            let c = with_outputs(c, out_dir, seed, &name);
            let out = fit(&cfg.model, &c, studies.to_vec(), Some(&sup.best))?;
            let scored = match cfg.ablation.ssl_selection {
                SslSelection::BestOnValidation => &out.best,
                SslSelection::Last => &out.last,
            };
            let r = row(cfg, studies, v, seed, scored, &out.splits)?;
            progress(&r);
            table.rows.push(r);
        }
    }
    Ok(table)
}
