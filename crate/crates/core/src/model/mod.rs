//! Convolutional feature encoder + pre-norm transformer with a 448-d
//! projection head and a two-layer classifier head.
//!
//! Parameters live in one flat `f64` buffer described by a [`Layout`];
//! gradients use the same layout so optimizers can work group-wise on plain
//! slices.

mod checkpoint;
mod encoder;
pub mod gradcheck;
mod heads;
pub(crate) mod ops;
mod transformer;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, tag};
use crate::{Error, Result, HOP_SAMPLES, TARGET_DIM};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Latent frames per input; the input length is `frames * 320`.
    pub frames: usize,
    pub target_dim: usize,
    pub n_classes: usize,
    pub classifier_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            conv_strides: vec![5, 4, 4, 4],
            conv_kernels: vec![10, 8, 4, 4],
            conv_channels: vec![8, 16, 32, 64],
            frames: crate::FRAMES,
            target_dim: TARGET_DIM,
            n_classes: 2,
            classifier_hidden: 64,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    /// Reduced configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            conv_strides: vec![5, 4, 4, 4],
            conv_kernels: vec![10, 8, 4, 4],
            conv_channels: vec![4, 4, 8, 8],
            frames: 20,
            target_dim: TARGET_DIM,
            n_classes: 2,
            classifier_hidden: 16,
            dropout_rate: 0.1,
        }
    }

    pub fn input_samples(&self) -> usize {
        self.frames * HOP_SAMPLES
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let stride: usize = self.conv_strides.iter().product();
        if stride != HOP_SAMPLES {
            return bad(format!("conv stride product is {stride}, must be {HOP_SAMPLES}"));
        }
        let n = self.conv_strides.len();
        if self.conv_kernels.len() != n || self.conv_channels.len() != n {
            return bad("conv_strides, conv_kernels and conv_channels must have equal length".into());
        }
        for i in 0..n {
            if self.conv_kernels[i] < self.conv_strides[i] {
                return bad(format!("conv layer {i}: kernel smaller than stride"));
            }
        }
        if self.conv_channels.contains(&0) || self.conv_strides.contains(&0) {
            return bad("conv channels and strides must be positive".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.ffn_dim == 0 || self.classifier_hidden == 0 || self.frames == 0 {
            return bad("ffn_dim, classifier_hidden and frames must be positive".into());
        }
        if self.target_dim != TARGET_DIM {
            return bad(format!("target_dim must be {TARGET_DIM}"));
        }
        if self.n_classes != 2 {
            return bad("n_classes must be 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Projection,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Projection, ParamGroup::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Projection => "projection",
            ParamGroup::Classifier => "classifier",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl TensorInfo {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: TensorId,
    pub beta: TensorId,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIds {
    pub w: TensorId,
    pub b: TensorId,
    pub norm: NormIds,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Ids {
    pub conv: Vec<ConvIds>,
    pub feat_norm: NormIds,
    pub feat_proj: LinearIds,
    pub mask: TensorId,
    pub blocks: Vec<BlockIds>,
    pub final_norm: NormIds,
    pub projection: LinearIds,
    pub cls_hidden: LinearIds,
    pub cls_out: LinearIds,
}

/// Names, shapes, groups and offsets of every parameter tensor.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorInfo>,
    total: usize,
    pub(crate) ids: Ids,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, group: ParamGroup, shape: Vec<usize>) -> TensorId {
        let len = shape.iter().product();
        self.tensors.push(TensorInfo { name, group, shape, offset: self.total, len });
        self.total += len;
        TensorId(self.tensors.len() - 1)
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.weight"), group, vec![fan_in, fan_out]),
            b: self.add(format!("{name}.bias"), group, vec![fan_out]),
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{name}.gamma"), ParamGroup::Backbone, vec![dim]),
            beta: self.add(format!("{name}.beta"), ParamGroup::Backbone, vec![dim]),
            dim,
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use ParamGroup::*;
        let mut b = LayoutBuilder { tensors: Vec::new(), total: 0 };
        let mut conv = Vec::new();
        let mut in_ch = 1;
        for (i, ((&stride, &kernel), &out_ch)) in
            cfg.conv_strides.iter().zip(&cfg.conv_kernels).zip(&cfg.conv_channels).enumerate()
        {
            conv.push(ConvIds {
                w: b.add(format!("conv.{i}.weight"), Backbone, vec![kernel, in_ch, out_ch]),
                b: b.add(format!("conv.{i}.bias"), Backbone, vec![out_ch]),
                norm: b.norm(&format!("conv.{i}.norm"), out_ch),
                in_ch,
                out_ch,
                kernel,
                stride,
            });
            in_ch = out_ch;
        }
        let h = cfg.hidden_dim;
        let feat_norm = b.norm("feature_norm", in_ch);
        let feat_proj = b.linear("feature_proj", Backbone, in_ch, h);
        let mask = b.add("mask_embedding".into(), Backbone, vec![h]);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockIds {
                ln1: b.norm(&format!("layers.{l}.attn_norm"), h),
                q: b.linear(&format!("layers.{l}.query"), Backbone, h, h),
                k: b.linear(&format!("layers.{l}.key"), Backbone, h, h),
                v: b.linear(&format!("layers.{l}.value"), Backbone, h, h),
                o: b.linear(&format!("layers.{l}.attn_out"), Backbone, h, h),
                ln2: b.norm(&format!("layers.{l}.ffn_norm"), h),
                ff1: b.linear(&format!("layers.{l}.ffn_in"), Backbone, h, cfg.ffn_dim),
                ff2: b.linear(&format!("layers.{l}.ffn_out"), Backbone, cfg.ffn_dim, h),
            })
            .collect();
        let final_norm = b.norm("final_norm", h);
        let projection = b.linear("projection", Projection, h, cfg.target_dim);
        let cls_hidden = b.linear("classifier.hidden", Classifier, h, cfg.classifier_hidden);
        let cls_out = b.linear("classifier.out", Classifier, cfg.classifier_hidden, cfg.n_classes);
        let ids = Ids { conv, feat_norm, feat_proj, mask, blocks, final_norm, projection, cls_hidden, cls_out };
        Layout { tensors: b.tensors, total: b.total, ids }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub(crate) fn range(&self, id: TensorId) -> Range<usize> {
        self.tensors[id.0].range()
    }

    /// Flat index ranges belonging to `group`.
    pub fn group_ranges(&self, group: ParamGroup) -> Vec<Range<usize>> {
        self.tensors.iter().filter(|t| t.group == group).map(TensorInfo::range).collect()
    }

    /// Group of every flat coordinate.
    pub fn coordinate_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::with_capacity(self.total);
        for t in &self.tensors {
            out.extend(std::iter::repeat_n(t.group, t.len));
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { what: "matrix data", expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Dropout behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from streams derived from `seed`.
    Train { seed: u64 },
}

pub(crate) const DROPOUT_SITE_HEAD: u64 = 1_000;

/// Per-element keep/scale factors for inverted dropout, or `None` when
/// dropout is inactive.
pub(crate) fn dropout_mask(mode: Mode, rate: f64, site: u64, len: usize) -> Option<Vec<f64>> {
    match mode {
        Mode::Train { seed } if rate > 0.0 => {
            let mut rng = rng_for(seed, &[site]);
            let scale = 1.0 / (1.0 - rate);
            Some((0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale }).collect())
        }
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl ModelParams {
    /// Seeded initialisation: weights uniform in `±1/sqrt(fan_in)`, norm
    /// gains 1 and offsets 0, mask embedding uniform in `±0.1`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut values = vec![0.0; layout.total()];
        for (idx, t) in layout.tensors().iter().enumerate() {
            let mut rng = rng_for(seed, &[tag::INIT, idx as u64]);
            let dst = &mut values[t.range()];
            let leaf = t.name.rsplit('.').next().unwrap_or("");
            if t.name == "mask_embedding" {
                dst.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            } else if leaf == "gamma" {
                dst.fill(1.0);
            } else if leaf == "beta" {
                dst.fill(0.0);
            } else {
                // weights and biases share the scale of their layer's fan-in
                let fan_in = fan_in_of(&layout, t);
                let a = 1.0 / (fan_in as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
            }
        }
        Ok(Self { config: config.clone(), layout: Arc::new(layout), values })
    }

    /// Wraps raw values; `values` must match the layout of `config`.
    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch { what: "parameter vector", expected: layout.total(), actual: values.len() });
        }
        Ok(Self { config: config.clone(), layout: Arc::new(layout), values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.find(name)?.range();
        Some(&mut self.values[r])
    }

    /// Values rounded through binary32, as stored in checkpoints.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        out
    }

    pub(crate) fn t(&self, id: TensorId) -> &[f64] {
        &self.values[self.layout.range(id)]
    }

    pub(crate) fn ids(&self) -> &Ids {
        &self.layout.ids
    }

    /// Latent frames `z` for one input of `frames * 320` samples.
    pub fn encode_latents(&self, samples: &[f32]) -> Result<Matrix> {
        let (z, _) = self.encode_forward(samples)?;
        Matrix::new(self.config.frames, self.config.hidden_dim, z)
    }

    /// Transformer over (possibly masked) latents.
    pub fn contextualize(&self, z: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_shape(z, self.config.hidden_dim)?;
        let (h, _) = self.context_forward(z.data(), mode);
        Matrix::new(self.config.frames, self.config.hidden_dim, h)
    }

    /// Per-frame affine map into the target space.
    pub fn project(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.config.hidden_dim {
            return Err(Error::DimensionMismatch { what: "projection input width", expected: self.config.hidden_dim, actual: h.cols() });
        }
        let p = self.ids().projection;
        let out = ops::linear(h.data(), h.rows(), self.t(p.w), self.t(p.b), p.fan_in, p.fan_out);
        Matrix::new(h.rows(), p.fan_out, out)
    }

    /// Mean pool, affine, dropout (train only), ReLU, affine.
    pub fn classify(&self, h: &Matrix, mode: Mode) -> Result<Vec<f64>> {
        if h.cols() != self.config.hidden_dim || h.rows() == 0 {
            return Err(Error::DimensionMismatch { what: "classifier input width", expected: self.config.hidden_dim, actual: h.cols() });
        }
        let (logits, _) = self.classify_forward(h.data(), h.rows(), mode);
        Ok(logits)
    }

    /// Evaluation-mode logits for one input.
    pub fn logits(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let (z, _) = self.encode_forward(samples)?;
        let (h, _) = self.context_forward(&z, Mode::Eval);
        let (logits, _) = self.classify_forward(&h, self.config.frames, Mode::Eval);
        Ok(logits)
    }

    fn check_shape(&self, m: &Matrix, cols: usize) -> Result<()> {
        if m.rows() != self.config.frames {
            return Err(Error::DimensionMismatch { what: "frame count", expected: self.config.frames, actual: m.rows() });
        }
        if m.cols() != cols {
            return Err(Error::DimensionMismatch { what: "feature width", expected: cols, actual: m.cols() });
        }
        Ok(())
    }
}

fn fan_in_of(layout: &Layout, t: &TensorInfo) -> usize {
    let stem = t.name.rsplit_once('.').map(|(s, _)| s).unwrap_or(&t.name);
    let weight = layout.find(&format!("{stem}.weight")).unwrap_or(t);
    match weight.shape.len() {
        3 => weight.shape[0] * weight.shape[1],
        2 => weight.shape[0],
        _ => weight.len.max(1),
    }
}

/// Adds `src` into `dst` element-wise.
pub(crate) fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
