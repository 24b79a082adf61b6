//! Mean-teacher semi-supervised training of a hetero-modal center-heatmap
//! lesion detector, with a synthetic multi-sequence data generator and
//! per-patient FROC evaluation.

pub mod augment;
pub mod bbox;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod froc_eval;
pub mod heatmap_codec;
pub mod hetero_net;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use bbox::BBox;
pub use error::{Error, Result};
