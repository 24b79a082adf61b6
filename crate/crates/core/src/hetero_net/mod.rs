//! Hetero-modal center-heatmap detector.
//!
//! Each present sequence goes through its own stride-2 stem; the stem
//! activations are fused by [`fuse`] (mean ++ variance over whatever
//! sequences are present) and a shared trunk plus three heads produce the
//! heatmap, size and offset maps at the output stride.

mod fusion;
mod layers;

use std::collections::BTreeMap;

use base64::Engine as _;
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub use fusion::{fuse, fuse_backward};
pub use layers::{sigmoid, softplus, Conv2d, ConvCache};

use crate::dataset::canonical_sequences;
use crate::error::{Error, Result};
use crate::rng::Rng;
use layers::{relu_backward_inplace, relu_inplace, upsample2, upsample2_backward};

/// Images of one study keyed by sequence name.
pub type SequenceImages = BTreeMap<String, Array2<f32>>;

/// Initial heatmap probability; the head bias is set to its logit.
pub const HEATMAP_PRIOR: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Canonical sequence names, one stem each.
    pub sequences: Vec<String>,
    pub stem_channels: usize,
    pub trunk_channels: usize,
    /// Extra stride-1 convolutions after the trunk reaches the output stride.
    pub trunk_depth: usize,
    pub head_channels: usize,
    /// Output stride R; a power of two, at least 2.
    pub stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sequences: canonical_sequences(5),
            stem_channels: 8,
            trunk_channels: 16,
            trunk_depth: 1,
            head_channels: 8,
            stride: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.sequences.is_empty() {
            return bad("model needs at least one sequence");
        }
        if self.stem_channels == 0 || self.trunk_channels == 0 || self.head_channels == 0 {
            return bad("channel widths must be positive");
        }
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return bad("stride must be a power of two >= 2");
        }
        Ok(())
    }

    /// Validates and additionally requires the codec's stride.
    pub fn validate_for(&self, codec_stride: usize) -> Result<()> {
        self.validate()?;
        if self.stride != codec_stride {
            return Err(Error::InvalidConfig(format!(
                "model stride {} does not match codec stride {codec_stride}",
                self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

/// All learnable parameters. Teacher and student are two values of this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub stems: Vec<Conv2d>,
    pub trunk: Vec<Conv2d>,
    pub context_down: Conv2d,
    pub context_conv: Conv2d,
    pub merge: Conv2d,
    /// Heatmap, size and offset heads, in that order.
    pub heads: Vec<Head>,
}

const HEAD_NAMES: [&str; 3] = ["heatmap", "size", "offset"];
const HEAD_OUTPUTS: [usize; 3] = [1, 2, 2];

impl Params {
    fn build(
        cfg: &ModelConfig,
        mut make: impl FnMut(usize, usize, usize, usize) -> Conv2d,
    ) -> Self {
        let (cs, f, hc) = (cfg.stem_channels, cfg.trunk_channels, cfg.head_channels);
        let stems = cfg.sequences.iter().map(|_| make(1, cs, 3, 2)).collect();
        let downs = cfg.stride.trailing_zeros() as usize - 1;
        let mut trunk = vec![make(2 * cs, f, 3, if downs > 0 { 2 } else { 1 })];
        for _ in 1..downs {
            trunk.push(make(f, f, 3, 2));
        }
        for _ in 0..cfg.trunk_depth {
            trunk.push(make(f, f, 3, 1));
        }
        let context_down = make(f, f, 3, 2);
        let context_conv = make(f, f, 3, 1);
        let merge = make(f, f, 3, 1);
        let heads = HEAD_OUTPUTS
            .iter()
            .map(|&n| Head {
                hidden: make(f, hc, 3, 1),
                out: make(hc, n, 1, 1),
            })
            .collect();
        Self {
            stems,
            trunk,
            context_down,
            context_conv,
            merge,
            heads,
        }
    }

    /// Deterministic given the rng state.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::build(cfg, |cin, cout, k, s| Conv2d::init(cin, cout, k, s, rng));
        for head in &mut params.heads {
            head.out =
                Conv2d::init_small(head.out.in_channels, head.out.out_channels, 1, 0.01, rng);
        }
        let prior_logit = (HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR)).ln();
        params.heads[0].out.bias.fill(prior_logit);
        // start sizes near one output cell
        params.heads[1].out.bias.fill(1.0);
        params.heads[2].out.bias.fill(0.5);
        Ok(params)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, Conv2d::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut v: Vec<(String, &Conv2d)> = Vec::new();
        for (n, c) in self.stems.iter().enumerate() {
            v.push((format!("stem{n}"), c));
        }
        for (n, c) in self.trunk.iter().enumerate() {
            v.push((format!("trunk{n}"), c));
        }
        v.push(("context_down".into(), &self.context_down));
        v.push(("context_conv".into(), &self.context_conv));
        v.push(("merge".into(), &self.merge));
        for (h, name) in self.heads.iter().zip(HEAD_NAMES) {
            v.push((format!("{name}_hidden"), &h.hidden));
            v.push((format!("{name}_out"), &h.out));
        }
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = Vec::new();
        v.extend(self.stems.iter_mut());
        v.extend(self.trunk.iter_mut());
        v.push(&mut self.context_down);
        v.push(&mut self.context_conv);
        v.push(&mut self.merge);
        for h in &mut self.heads {
            v.push(&mut h.hidden);
            v.push(&mut h.out);
        }
        v
    }

    /// Named flat tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        self.convs()
            .into_iter()
            .flat_map(|(name, c)| {
                [
                    (format!("{name}.weight"), c.weight.as_slice()),
                    (format!("{name}.bias"), c.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_structure(&self, other: &Params) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.0 == y.0 && x.1.len() == y.1.len())
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors()
            .into_iter()
            .map(|(name, data)| TensorRecord::encode(name, data))
            .collect()
    }

    /// Rebuilds parameters for `cfg` from serialized records, bit-exactly.
    pub fn from_records(cfg: &ModelConfig, records: &[TensorRecord]) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zeros(cfg);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != records.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                names.len()
            )));
        }
        for ((name, slot), rec) in names.iter().zip(params.tensors_mut()).zip(records) {
            if &rec.name != name {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} where {name} expected",
                    rec.name
                )));
            }
            let data = rec.decode()?;
            if data.len() != slot.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: {} values, expected {}",
                    data.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&data);
        }
        Ok(params)
    }
}

/// A flat `f32` tensor stored as base64 little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub len: usize,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(name: String, values: &[f32]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name,
            len: values.len(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Invariant(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() != 4 * self.len {
            return Err(Error::ShapeMismatch(format!(
                "tensor {}: {} bytes for {} values",
                self.name,
                bytes.len(),
                self.len
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Predicted maps at the output stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// `(h, w)`, in `(0, 1)`.
    pub heatmap: Array2<f32>,
    /// `(2, h, w)`, non-negative, output-stride units.
    pub size: Array3<f32>,
    /// `(2, h, w)`.
    pub offset: Array3<f32>,
}

impl DetectorOutput {
    pub fn grid(&self) -> (usize, usize) {
        self.heatmap.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.heatmap.iter().all(|v| v.is_finite())
            && self.size.iter().all(|v| v.is_finite())
            && self.offset.iter().all(|v| v.is_finite())
    }
}

/// Loss gradients with respect to each output map.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub heatmap: Array2<f32>,
    pub size: Array3<f32>,
    pub offset: Array3<f32>,
}

impl OutputGrads {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            heatmap: Array2::zeros((h, w)),
            size: Array3::zeros((2, h, w)),
            offset: Array3::zeros((2, h, w)),
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.heatmap.mapv_inplace(|v| v * s);
        self.size.mapv_inplace(|v| v * s);
        self.offset.mapv_inplace(|v| v * s);
    }

    pub fn add_assign(&mut self, other: &OutputGrads) {
        self.heatmap += &other.heatmap;
        self.size += &other.size;
        self.offset += &other.offset;
    }
}

struct Step {
    cache: ConvCache,
    act: Array3<f32>,
}

fn conv_relu(conv: &Conv2d, x: &Array3<f32>) -> Step {
    let (mut act, cache) = conv.forward(x);
    relu_inplace(&mut act);
    Step { cache, act }
}

fn conv_relu_back(
    conv: &Conv2d,
    step: &Step,
    mut grad: Array3<f32>,
    acc: &mut Conv2d,
    need_input_grad: bool,
) -> Option<Array3<f32>> {
    relu_backward_inplace(&mut grad, &step.act);
    conv.backward(&step.cache, &grad, acc, need_input_grad)
}

/// Intermediate state kept by a training forward pass.
pub struct Trace {
    stem_index: Vec<usize>,
    stems: Vec<Step>,
    trunk: Vec<Step>,
    context_down: Step,
    context_conv: Step,
    merge: Step,
    head_hidden: Vec<Step>,
    head_out: Vec<(ConvCache, Array3<f32>)>,
}

/// The detector architecture; parameters are passed separately so teacher and
/// student share one description.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroNet {
    config: ModelConfig,
}

impl HeteroNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<Params> {
        Params::init(&self.config, rng)
    }

    fn resolve(&self, images: &SequenceImages) -> Result<(Vec<usize>, (usize, usize))> {
        if images.is_empty() {
            return Err(Error::NoSequences);
        }
        let mut idx = Vec::with_capacity(images.len());
        let mut dim = None;
        for (name, img) in images {
            let n = self
                .config
                .sequences
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Error::UnknownSequence(name.clone()))?;
            match dim {
                None => dim = Some(img.dim()),
                Some(d) if d != img.dim() => {
                    return Err(Error::ShapeMismatch(format!(
                        "sequence {name} is {:?}, others {:?}",
                        img.dim(),
                        d
                    )))
                }
                _ => {}
            }
            idx.push(n);
        }
        let (h, w) = dim.expect("non-empty");
        let unit = 2 * self.config.stride;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} must be a multiple of {unit}"
            )));
        }
        Ok((idx, (h, w)))
    }

    pub fn forward(&self, params: &Params, images: &SequenceImages) -> Result<DetectorOutput> {
        self.forward_train(params, images).map(|(out, _)| out)
    }

    pub fn forward_train(
        &self,
        params: &Params,
        images: &SequenceImages,
    ) -> Result<(DetectorOutput, Trace)> {
        let (mut stem_index, _) = self.resolve(images)?;
        let mut inputs: Vec<(usize, &Array2<f32>)> =
            stem_index.iter().copied().zip(images.values()).collect();
        inputs.sort_by_key(|(n, _)| *n);
        stem_index = inputs.iter().map(|(n, _)| *n).collect();

        let stems: Vec<Step> = inputs
            .iter()
            .map(|(n, img)| {
                let x = img.view().insert_axis(Axis(0)).to_owned();
                conv_relu(&params.stems[*n], &x)
            })
            .collect();
        let views: Vec<ArrayView3<f32>> = stems.iter().map(|s| s.act.view()).collect();
        let mut x = fuse(&views)?;

        let mut trunk = Vec::with_capacity(params.trunk.len());
        for conv in &params.trunk {
            let step = conv_relu(conv, &x);
            x = step.act.clone();
            trunk.push(step);
        }
        let context_down = conv_relu(&params.context_down, &x);
        let context_conv = conv_relu(&params.context_conv, &context_down.act);
        let joined = upsample2(&context_conv.act) + &x;
        let merge = conv_relu(&params.merge, &joined);

        let mut head_hidden = Vec::with_capacity(3);
        let mut head_out = Vec::with_capacity(3);
        for head in &params.heads {
            let hidden = conv_relu(&head.hidden, &merge.act);
            let (raw, cache) = head.out.forward(&hidden.act);
            head_hidden.push(hidden);
            head_out.push((cache, raw));
        }
        let heatmap = head_out[0].1.index_axis(Axis(0), 0).mapv(sigmoid);
        let size = head_out[1].1.mapv(softplus);
        let offset = head_out[2].1.clone();

        let out = DetectorOutput {
            heatmap,
            size,
            offset,
        };
        let trace = Trace {
            stem_index,
            stems,
            trunk,
            context_down,
            context_conv,
            merge,
            head_hidden,
            head_out,
        };
        Ok((out, trace))
    }

    /// Accumulates parameter gradients for one forward pass into `acc`.
    pub fn backward(
        &self,
        params: &Params,
        trace: &Trace,
        output: &DetectorOutput,
        grads: &OutputGrads,
        acc: &mut Params,
    ) -> Result<()> {
        let grid = output.grid();
        if grads.heatmap.dim() != grid || grads.size.dim() != (2, grid.0, grid.1) {
            return Err(Error::ShapeMismatch("output gradient shape".into()));
        }
        // through the output nonlinearities
        let d_heat =
            (&grads.heatmap * &output.heatmap.mapv(|y| y * (1.0 - y))).insert_axis(Axis(0));
        let d_size = &grads.size * &trace.head_out[1].1.mapv(sigmoid);
        let d_off = grads.offset.clone();
        let d_raw = [d_heat, d_size, d_off];

        let mut d_merge = Array3::<f32>::zeros(trace.merge.act.dim());
        for (n, ((head, dr), hidden)) in params
            .heads
            .iter()
            .zip(&d_raw)
            .zip(&trace.head_hidden)
            .enumerate()
        {
            let acc_head = &mut acc.heads[n];
            let d_hidden = head
                .out
                .backward(&trace.head_out[n].0, dr, &mut acc_head.out, true)
                .expect("requested");
            let dm = conv_relu_back(&head.hidden, hidden, d_hidden, &mut acc_head.hidden, true)
                .expect("requested");
            d_merge += &dm;
        }
        let d_joined = conv_relu_back(&params.merge, &trace.merge, d_merge, &mut acc.merge, true)
            .expect("requested");
        let d_ctx = upsample2_backward(&d_joined);
        let d_ctx = conv_relu_back(
            &params.context_conv,
            &trace.context_conv,
            d_ctx,
            &mut acc.context_conv,
            true,
        )
        .expect("requested");
        let d_from_ctx = conv_relu_back(
            &params.context_down,
            &trace.context_down,
            d_ctx,
            &mut acc.context_down,
            true,
        )
        .expect("requested");
        let mut dx = d_joined + &d_from_ctx;
        for (n, (conv, step)) in params.trunk.iter().zip(&trace.trunk).enumerate().rev() {
            dx = conv_relu_back(conv, step, dx, &mut acc.trunk[n], true).expect("requested");
        }
        let views: Vec<ArrayView3<f32>> = trace.stems.iter().map(|s| s.act.view()).collect();
        let d_stems = fuse_backward(&views, dx.view())?;
        for ((&n, step), d) in trace.stem_index.iter().zip(&trace.stems).zip(d_stems) {
            conv_relu_back(&params.stems[n], step, d, &mut acc.stems[n], false);
        }
        Ok(())
    }
}
