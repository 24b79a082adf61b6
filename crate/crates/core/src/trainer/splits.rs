use serde::{Deserialize, Serialize};

use crate::dataset::{SplitTag, Study};
use crate::error::{Error, Result};
use crate::rng::stable_hash;

const BUCKETS: usize = 10;
// keeps the label mask independent of the fold ranking
const MASK_SALT: u64 = 0x6d61_736b;

/// Cross-validation over labeled studies: ten hash-ranked buckets, two test,
/// one validation, seven training per fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub n_folds: usize,
    pub fold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_folds: 5,
            fold: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds != BUCKETS / 2 {
            return Err(Error::InvalidConfig(format!(
                "only {}-fold splits are supported, got {}",
                BUCKETS / 2,
                self.n_folds
            )));
        }
        if self.fold >= self.n_folds {
            return Err(Error::InvalidConfig(format!(
                "fold {} out of range 0..{}",
                self.fold, self.n_folds
            )));
        }
        Ok(())
    }

    fn role(&self, bucket: usize) -> Role {
        let f = self.fold;
        if bucket == 2 * f || bucket == 2 * f + 1 {
            Role::Test
        } else if bucket == (2 * f + 2) % BUCKETS {
            Role::Val
        } else {
            Role::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Train,
    Val,
    Test,
}

/// Indices into the study list.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train_labeled: Vec<usize>,
    /// Unlabeled studies plus training studies whose labels were masked.
    pub train_unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn ranked(studies: &[Study], idx: &[usize], seed: u64) -> Vec<usize> {
    let mut keyed: Vec<(u64, &str, usize)> = idx
        .iter()
        .map(|&i| {
            (
                stable_hash(seed, &studies[i].study_id),
                studies[i].study_id.as_str(),
                i,
            )
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Deterministic in the study ids and `cfg`; independent of list order.
pub fn assign_splits(
    studies: &[Study],
    cfg: &SplitConfig,
    labeled_fraction: f64,
    use_incomplete: bool,
) -> Result<Splits> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::InvalidConfig(format!(
            "labeled_fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let labeled: Vec<usize> = (0..studies.len())
        .filter(|&i| studies[i].split_tag == SplitTag::Labeled)
        .collect();
    let order = ranked(studies, &labeled, cfg.seed);
    let n = order.len();
    let mut s = Splits::default();
    let mut train = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        match cfg.role(rank * BUCKETS / n.max(1)) {
            Role::Train => train.push(i),
            Role::Val => s.val.push(i),
            Role::Test => s.test.push(i),
        }
    }

    let keep = if labeled_fraction > 0.0 && !train.is_empty() {
        ((labeled_fraction * train.len() as f64).round() as usize).clamp(1, train.len())
    } else {
        0
    };
    let masked_order = ranked(studies, &train, cfg.seed ^ MASK_SALT);
    s.train_labeled = masked_order[..keep].to_vec();
    s.train_unlabeled = masked_order[keep..].to_vec();
    for (i, st) in studies.iter().enumerate() {
        match st.split_tag {
            SplitTag::UnlabeledComplete => s.train_unlabeled.push(i),
            SplitTag::UnlabeledIncomplete if use_incomplete => s.train_unlabeled.push(i),
            _ => {}
        }
    }
    for v in [
        &mut s.train_labeled,
        &mut s.train_unlabeled,
        &mut s.val,
        &mut s.test,
    ] {
        v.sort_unstable();
    }
    Ok(s)
}
