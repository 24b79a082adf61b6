//! Synthetic multi-sequence studies.
//!
//! Each study is one 2D slice observed under up to `k` sequences. Lesions are
//! elliptical blobs whose contrast differs per sequence; distractor blobs show
//! up in a single sequence only, so combining sequences is what separates
//! lesions from look-alikes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STUDY_META_FILE: &str = "boxes.json";

/// Canonical sequence names `seq1..seqk`.
pub fn canonical_sequences(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("seq{i}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Labeled,
    UnlabeledComplete,
    UnlabeledIncomplete,
}

impl SplitTag {
    pub fn is_labeled(self) -> bool {
        self == SplitTag::Labeled
    }
}

/// Per-sequence rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAppearance {
    /// Signed lesion contrast relative to the background.
    pub lesion_contrast: f32,
    pub noise_std: f32,
    pub background_gain: f32,
    pub background_bias: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_labeled: usize,
    pub n_unlabeled_complete: usize,
    pub n_unlabeled_incomplete: usize,
    pub height: usize,
    pub width: usize,
    pub k_sequences: usize,
    /// Output stride of the detector; image sides must be multiples of it.
    pub stride: usize,
    /// Inclusive range of lesions per study.
    pub lesion_count: (usize, usize),
    /// Semi-axis range in pixels.
    pub lesion_radius: (f64, f64),
    /// Largest semi-axis ratio of a lesion ellipse.
    pub max_aspect: f64,
    /// Per-lesion, per-sequence multiplier on the lesion contrast.
    pub visibility: (f32, f32),
    /// Inclusive range of single-sequence distractor blobs per study.
    pub distractor_count: (usize, usize),
    /// Empty means "use the built-in appearance table".
    pub appearance: Vec<SequenceAppearance>,
    /// Per-study, per-sequence gamma applied to the rendered image, drawn
    /// log-uniformly from this range (acquisition drift between scanners).
    pub acquisition_gamma: (f32, f32),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_labeled: 60,
            n_unlabeled_complete: 40,
            n_unlabeled_incomplete: 10,
            height: 64,
            width: 64,
            k_sequences: 5,
            stride: 4,
            lesion_count: (1, 3),
            lesion_radius: (3.0, 7.0),
            max_aspect: 1.3,
            visibility: (0.35, 1.3),
            distractor_count: (0, 3),
            appearance: Vec::new(),
            acquisition_gamma: (1.0, 1.0),
            seed: 0,
        }
    }
}

fn default_appearance(k: usize) -> Vec<SequenceAppearance> {
    // contrast, noise, gain, bias
    const TABLE: [(f32, f32, f32, f32); 5] = [
        (-0.14, 0.06, 0.55, 0.30),
        (0.16, 0.07, 0.45, 0.30),
        (0.10, 0.05, 0.40, 0.35),
        (0.20, 0.08, 0.50, 0.25),
        (0.13, 0.09, 0.30, 0.30),
    ];
    (0..k)
        .map(|i| {
            let (c, n, g, b) = TABLE[i % TABLE.len()];
            SequenceAppearance {
                lesion_contrast: c,
                noise_std: n,
                background_gain: g,
                background_bias: b,
            }
        })
        .collect()
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_sequences == 0 {
            return bad("k_sequences must be positive".into());
        }
        if self.stride == 0
            || !self.height.is_multiple_of(self.stride)
            || !self.width.is_multiple_of(self.stride)
        {
            return bad(format!(
                "image {}x{} not divisible by stride {}",
                self.height, self.width, self.stride
            ));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad("lesion_count range is reversed".into());
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return bad("distractor_count range is reversed".into());
        }
        let (r_lo, r_hi) = self.lesion_radius;
        if !(r_lo > 0.0 && r_lo <= r_hi) {
            return bad(format!("lesion radius range ({r_lo}, {r_hi}) is invalid"));
        }
        let r_max = r_hi * self.max_aspect.max(1.0);
        if 2.0 * r_max >= self.height.min(self.width) as f64 {
            return bad(format!(
                "lesion radius {r_max} does not fit in a {}x{} image",
                self.height, self.width
            ));
        }
        if self.max_aspect < 1.0 {
            return bad("max_aspect must be >= 1".into());
        }
        if !self.appearance.is_empty() && self.appearance.len() != self.k_sequences {
            return bad("appearance table length must equal k_sequences".into());
        }
        let (g_lo, g_hi) = self.acquisition_gamma;
        if !(g_lo > 0.0 && g_lo <= g_hi && g_hi.is_finite()) {
            return bad(format!(
                "acquisition_gamma range ({g_lo}, {g_hi}) is invalid"
            ));
        }
        if self.n_unlabeled_incomplete > 0 && self.k_sequences < 2 {
            return bad("incomplete studies need at least two sequences".into());
        }
        Ok(())
    }

    pub fn sequence_names(&self) -> Vec<String> {
        canonical_sequences(self.k_sequences)
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled_complete + self.n_unlabeled_incomplete
    }

    fn appearance_table(&self) -> Vec<SequenceAppearance> {
        if self.appearance.is_empty() {
            default_appearance(self.k_sequences)
        } else {
            self.appearance.clone()
        }
    }
}

/// One patient: a slice under several sequences plus optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub sequences: BTreeMap<String, Array2<f32>>,
    pub boxes: Option<Vec<BBox>>,
    pub split_tag: SplitTag,
}

impl Study {
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.sequences.values().next().map(|a| a.dim())
    }

    pub fn has_lesions(&self) -> bool {
        self.boxes.as_ref().is_some_and(|b| !b.is_empty())
    }

    /// Checks every structural invariant against the canonical sequence list.
    pub fn validate(&self, canonical: &[String]) -> Result<()> {
        let (h, w) = self.shape().ok_or(Error::NoSequences)?;
        for (name, img) in &self.sequences {
            if !canonical.contains(name) {
                return Err(Error::UnknownSequence(name.clone()));
            }
            if img.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "study {}: sequence {name} is {:?}, expected {:?}",
                    self.study_id,
                    img.dim(),
                    (h, w)
                )));
            }
        }
        match (&self.boxes, self.split_tag.is_labeled()) {
            (Some(boxes), true) => {
                for b in boxes {
                    b.validate_within(w, h)?;
                }
            }
            (None, false) => {}
            _ => {
                return Err(Error::Invariant(format!(
                    "study {}: boxes must be present iff labeled",
                    self.study_id
                )))
            }
        }
        let incomplete = self.sequences.len() < canonical.len();
        if incomplete != (self.split_tag == SplitTag::UnlabeledIncomplete) {
            return Err(Error::Invariant(format!(
                "study {}: split {:?} inconsistent with {} of {} sequences",
                self.study_id,
                self.split_tag,
                self.sequences.len(),
                canonical.len()
            )));
        }
        Ok(())
    }
}

/// An elliptical blob with per-sequence contrast multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Multiplier on each sequence's lesion contrast; zero hides the blob.
    pub visibility: Vec<f32>,
}

impl Blob {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }

    /// Intensity profile at a pixel center, in `[0.5, 1]` inside, 0 outside.
    pub fn profile(&self, x: f64, y: f64) -> f32 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let d2 = dx * dx + dy * dy;
        if d2 < 1.0 {
            (1.0 - 0.5 * d2) as f32
        } else {
            0.0
        }
    }
}

/// Everything random about a study, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub lesions: Vec<Blob>,
    pub distractors: Vec<Blob>,
    /// Low-frequency background terms `(amplitude, fx, fy, phase)`.
    pub background: Vec<(f32, f32, f32, f32)>,
    pub noise_seed: u64,
    /// One gamma per sequence; empty means 1.
    pub gammas: Vec<f32>,
}

fn sample_blob(spec: &DatasetSpec, rng: &mut Rng) -> (f64, f64, f64, f64) {
    let (r_lo, r_hi) = spec.lesion_radius;
    let r = if r_hi > r_lo {
        rng.random_range(r_lo..=r_hi)
    } else {
        r_lo
    };
    let aspect = if spec.max_aspect > 1.0 {
        rng.random_range(1.0..=spec.max_aspect)
    } else {
        1.0
    };
    let (rx, ry) = if rng.random_bool(0.5) {
        (r * aspect, r)
    } else {
        (r, r * aspect)
    };
    let w = spec.width as f64;
    let h = spec.height as f64;
    let cx = rng.random_range(rx..=(w - rx));
    let cy = rng.random_range(ry..=(h - ry));
    (cx, cy, rx, ry)
}

fn count_in(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_scene(spec: &DatasetSpec, rng: &mut Rng) -> Scene {
    let k = spec.k_sequences;
    let n_lesions = count_in(rng, spec.lesion_count);
    let lesions = (0..n_lesions)
        .map(|_| {
            let (cx, cy, rx, ry) = sample_blob(spec, rng);
            let (v_lo, v_hi) = spec.visibility;
            let visibility = (0..k)
                .map(|_| {
                    if v_hi > v_lo {
                        rng.random_range(v_lo..=v_hi)
                    } else {
                        v_lo
                    }
                })
                .collect();
            Blob {
                cx,
                cy,
                rx,
                ry,
                visibility,
            }
        })
        .collect();
    let n_distractors = count_in(rng, spec.distractor_count);
    let distractors = (0..n_distractors)
        .map(|_| {
            let (cx, cy, rx, ry) = sample_blob(spec, rng);
            let seq = rng.random_range(0..k);
            let strength = rng.random_range(0.8f32..=1.6);
            let visibility = (0..k)
                .map(|s| if s == seq { strength } else { 0.0 })
                .collect();
            Blob {
                cx,
                cy,
                rx,
                ry,
                visibility,
            }
        })
        .collect();
    let background = (0..4)
        .map(|_| {
            (
                rng.random_range(0.05f32..0.2),
                rng.random_range(0.2f32..1.5),
                rng.random_range(0.2f32..1.5),
                rng.random_range(0.0f32..std::f32::consts::TAU),
            )
        })
        .collect();
    let noise_seed = rng.random();
    let (g_lo, g_hi) = spec.acquisition_gamma;
    // drawn last and only when enabled, so scenes without drift are unchanged
    let gammas = if g_hi > g_lo {
        (0..k)
            .map(|_| rng.random_range(g_lo.ln()..=g_hi.ln()).exp())
            .collect()
    } else {
        Vec::new()
    };
    Scene {
        lesions,
        distractors,
        background,
        noise_seed,
        gammas,
    }
}

/// Renders all `k` sequences of a scene, clamped to `[0, 1]`.
pub fn render_scene(spec: &DatasetSpec, scene: &Scene) -> Vec<Array2<f32>> {
    let (h, w) = (spec.height, spec.width);
    let table = spec.appearance_table();
    let mut base = Array2::<f32>::zeros((h, w));
    for ((i, j), v) in base.indexed_iter_mut() {
        let x = (j as f32 + 0.5) / w as f32;
        let y = (i as f32 + 0.5) / h as f32;
        *v = 0.5
            + scene
                .background
                .iter()
                .map(|&(a, fx, fy, ph)| a * (std::f32::consts::TAU * (fx * x + fy * y) + ph).cos())
                .sum::<f32>();
    }
    let mut noise_rng = rng::substream(scene.noise_seed, Stream::Data, 0);
    table
        .iter()
        .enumerate()
        .map(|(s, app)| {
            let mut img = base.mapv(|b| app.background_bias + app.background_gain * b);
            for blob in scene.lesions.iter().chain(&scene.distractors) {
                let amp = app.lesion_contrast * blob.visibility[s];
                if amp == 0.0 {
                    continue;
                }
                splat_blob(&mut img, blob, amp);
            }
            let noise = Normal::new(0.0f32, app.noise_std.max(0.0)).expect("finite std");
            img.mapv_inplace(|v| {
                let n = if app.noise_std > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                (v + n).clamp(0.0, 1.0)
            });
            if let Some(&g) = scene.gammas.get(s).filter(|&&g| g != 1.0) {
                img.mapv_inplace(|v| v.powf(g));
            }
            img
        })
        .collect()
}

fn splat_blob(img: &mut Array2<f32>, blob: &Blob, amp: f32) {
    let (h, w) = img.dim();
    let i0 = (blob.cy - blob.ry).floor().max(0.0) as usize;
    let i1 = ((blob.cy + blob.ry).ceil() as usize).min(h);
    let j0 = (blob.cx - blob.rx).floor().max(0.0) as usize;
    let j1 = ((blob.cx + blob.rx).ceil() as usize).min(w);
    for i in i0..i1 {
        for j in j0..j1 {
            let p = blob.profile(j as f64 + 0.5, i as f64 + 0.5);
            if p > 0.0 {
                img[[i, j]] += amp * p;
            }
        }
    }
}

/// Generates one study from the caller's rng state.
pub fn generate_study(
    spec: &DatasetSpec,
    rng: &mut Rng,
    split_tag: SplitTag,
    study_id: impl Into<String>,
) -> Result<Study> {
    spec.validate()?;
    let scene = sample_scene(spec, rng);
    let images = render_scene(spec, &scene);
    let names = spec.sequence_names();
    let k = names.len();
    let dropped: u64 = if split_tag == SplitTag::UnlabeledIncomplete {
        // nonempty strict subset of the k sequences, uniformly
        rng.random_range(1..(1u64 << k) - 1)
    } else {
        0
    };
    let sequences = names
        .into_iter()
        .zip(images)
        .enumerate()
        .filter(|(s, _)| dropped & (1 << s) == 0)
        .map(|(_, kv)| kv)
        .collect();
    let boxes = split_tag
        .is_labeled()
        .then(|| scene.lesions.iter().map(Blob::bbox).collect());
    Ok(Study {
        study_id: study_id.into(),
        sequences,
        boxes,
        split_tag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study_id: String,
    pub split_tag: SplitTag,
    pub sequences: Vec<String>,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub sequences: Vec<String>,
    pub studies: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_studies(spec: &DatasetSpec, studies: &[Study]) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            height: spec.height,
            width: spec.width,
            sequences: spec.sequence_names(),
            studies: studies
                .iter()
                .map(|s| ManifestEntry {
                    study_id: s.study_id.clone(),
                    split_tag: s.split_tag,
                    sequences: s.sequences.keys().cloned().collect(),
                    shape: [spec.height, spec.width],
                })
                .collect(),
        }
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.studies.iter().filter(|s| s.split_tag == tag).count()
    }

    /// e.g. `110 studies (43 labeled / 50 complete / 17 incomplete)`.
    pub fn summary(&self) -> String {
        format!(
            "{} studies ({} labeled / {} complete / {} incomplete)",
            self.studies.len(),
            self.count(SplitTag::Labeled),
            self.count(SplitTag::UnlabeledComplete),
            self.count(SplitTag::UnlabeledIncomplete)
        )
    }
}

/// Generates every split. Study `n` draws from its own sub-stream of
/// `spec.seed`, so output is a pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<Study>, Manifest)> {
    spec.validate()?;
    let tags = std::iter::repeat_n(SplitTag::Labeled, spec.n_labeled)
        .chain(std::iter::repeat_n(
            SplitTag::UnlabeledComplete,
            spec.n_unlabeled_complete,
        ))
        .chain(std::iter::repeat_n(
            SplitTag::UnlabeledIncomplete,
            spec.n_unlabeled_incomplete,
        ));
    let studies = tags
        .enumerate()
        .map(|(n, tag)| {
            let mut rng = rng::substream(spec.seed, Stream::Data, n as u64);
            generate_study(spec, &mut rng, tag, format!("study_{n:05}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::from_studies(spec, &studies);
    Ok((studies, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyMeta {
    schema_version: u32,
    study_id: String,
    split_tag: SplitTag,
    shape: [usize; 2],
    canonical_sequences: Vec<String>,
    sequences: Vec<String>,
    boxes: Option<Vec<BBox>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Writes `dir/<seq>.npy` for every sequence plus `dir/boxes.json`.
pub fn save_study(dir: &Path, study: &Study, canonical: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = study.shape().ok_or(Error::NoSequences)?;
    for (name, img) in &study.sequences {
        let path = dir.join(format!("{name}.npy"));
        ndarray_npy::write_npy(&path, img).map_err(|e| Error::parse(&path, e))?;
    }
    let meta = StudyMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        study_id: study.study_id.clone(),
        split_tag: study.split_tag,
        shape: [h, w],
        canonical_sequences: canonical.to_vec(),
        sequences: study.sequences.keys().cloned().collect(),
        boxes: study.boxes.clone(),
    };
    write_json(&dir.join(STUDY_META_FILE), &meta)
}

pub fn load_study(dir: &Path) -> Result<Study> {
    let meta_path = dir.join(STUDY_META_FILE);
    let meta: StudyMeta = read_json(&meta_path)?;
    if meta.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: meta_path,
            found: meta.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let mut sequences = BTreeMap::new();
    for name in &meta.sequences {
        let path = dir.join(format!("{name}.npy"));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let img: Array2<f32> = ndarray_npy::read_npy(&path).map_err(|e| Error::parse(&path, e))?;
        if img.dim() != (meta.shape[0], meta.shape[1]) {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} but study shape is {:?}",
                path.display(),
                img.dim(),
                meta.shape
            )));
        }
        sequences.insert(name.clone(), img);
    }
    let study = Study {
        study_id: meta.study_id,
        sequences,
        boxes: meta.boxes,
        split_tag: meta.split_tag,
    };
    study.validate(&meta.canonical_sequences)?;
    Ok(study)
}

pub fn save_dataset(root: &Path, studies: &[Study], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for study in studies {
        save_study(&root.join(&study.study_id), study, &manifest.sequences)?;
    }
    write_json(&root.join(MANIFEST_FILE), manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&path)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path,
            found: manifest.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<(Vec<Study>, Manifest)> {
    let manifest = load_manifest(root)?;
    let studies = manifest
        .studies
        .iter()
        .map(|entry| {
            let study = load_study(&root.join(&entry.study_id))?;
            if study.split_tag != entry.split_tag {
                return Err(Error::Invariant(format!(
                    "study {}: manifest says {:?}, study file says {:?}",
                    entry.study_id, entry.split_tag, study.split_tag
                )));
            }
            Ok(study)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((studies, manifest))
}

/// Directory of a study inside a dataset root.
pub fn study_dir(root: &Path, study_id: &str) -> PathBuf {
    root.join(study_id)
}
