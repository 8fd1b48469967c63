//! Two small convolutional tile scorers and their SGD training loop.
//!
//! Both models apply 3×3 valid convolutions with [`FILTERS`] filters,
//! a squareplus activation `(x + √(x² + 4)) / 2` and global average pooling, then a linear layer and
//! a sigmoid. `Vanilla` convolves all channels at once. `MultiBranch` runs
//! one convolution over channel 0 and a second over the remaining
//! (auxiliary) channels and concatenates the pooled features.
//!
//! Parameters live in one flat `f64` vector. Initialization and every SGD
//! step keep them on the `f32` grid so checkpoints round-trip exactly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impute::{impute, ImputationKind, ImputationStrategy};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::resample::{build_plan, draw_epoch, BinSpec, ResampleError};
use crate::rng;
use crate::tiles::{Dataset, Tile};

/// Filters per convolution branch.
pub const FILTERS: usize = 4;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
const SQUAREPLUS_B: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{inputs} inputs but {labels} labels")]
    LengthMismatch { inputs: usize, labels: usize },
    #[error("model expects {expected} channels, input has {found}")]
    Channels { expected: usize, found: usize },
    #[error("input {height}x{width} is smaller than the 3x3 kernel")]
    TooSmall { height: usize, width: usize },
    #[error("non-finite input value at index {0}")]
    NonFinite(usize),
    #[error("tile `{0}` has no label")]
    Unlabeled(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vanilla,
    #[serde(rename = "multibranch")]
    MultiBranch,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Vanilla, ModelKind::MultiBranch];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::MultiBranch => "multibranch",
        }
    }

    /// Channel ranges `(start, count)` handled by each branch.
    fn branches(self, channels: usize) -> Vec<(usize, usize)> {
        match self {
            ModelKind::Vanilla => vec![(0, channels)],
            ModelKind::MultiBranch if channels == 1 => vec![(0, 1)],
            ModelKind::MultiBranch => vec![(0, 1), (1, channels - 1)],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" | "v" => Ok(ModelKind::Vanilla),
            "multibranch" | "m" => Ok(ModelKind::MultiBranch),
            other => Err(format!("unknown model `{other}` (expected vanilla or multibranch)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BranchLayout {
    first_channel: usize,
    channel_count: usize,
    weights: usize,
    biases: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    branches: Vec<BranchLayout>,
    linear: usize,
    linear_bias: usize,
    len: usize,
}

impl Layout {
    fn new(kind: ModelKind, channels: usize) -> Self {
        let mut offset = 0;
        let branches = kind
            .branches(channels)
            .into_iter()
            .map(|(first_channel, channel_count)| {
                let weights = offset;
                let biases = weights + FILTERS * channel_count * TAPS;
                offset = biases + FILTERS;
                BranchLayout {
                    first_channel,
                    channel_count,
                    weights,
                    biases,
                }
            })
            .collect::<Vec<_>>();
        let features = FILTERS * branches.len();
        let linear = offset;
        let linear_bias = linear + features;
        Self {
            branches,
            linear,
            linear_bias,
            len: linear_bias + 1,
        }
    }

    fn features(&self) -> usize {
        FILTERS * self.branches.len()
    }

    /// Named tensor shapes, in storage order.
    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.push((
                format!("branch{i}.conv.weight"),
                vec![FILTERS, b.channel_count, KERNEL, KERNEL],
            ));
            out.push((format!("branch{i}.conv.bias"), vec![FILTERS]));
        }
        out.push(("linear.weight".into(), vec![self.features()]));
        out.push(("linear.bias".into(), vec![1]));
        out
    }
}

/// Flat parameters of one model. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    channels: usize,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(kind: ModelKind, channels: usize) -> Self {
        let len = Layout::new(kind, channels).len;
        Self {
            kind,
            channels,
            values: vec![0.0; len],
        }
    }

    /// Wrap an existing flat vector; `None` if its length does not match.
    pub fn from_values(kind: ModelKind, channels: usize, values: Vec<f64>) -> Option<Self> {
        (values.len() == Layout::new(kind, channels).len).then_some(Self {
            kind,
            channels,
            values,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Named tensor shapes in storage order: per branch the conv weight
    /// `[filters, channels, 3, 3]` then its bias, then the linear weight and
    /// bias.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().shapes()
    }

    /// Final linear layer weights.
    pub fn linear_weights_mut(&mut self) -> &mut [f64] {
        let l = Layout::new(self.kind, self.channels);
        &mut self.values[l.linear..l.linear_bias]
    }

    fn layout(&self) -> Layout {
        Layout::new(self.kind, self.channels)
    }
}

/// Weights uniform in `±1/√fan_in` rounded to `f32`, zero biases.
pub fn init_params(kind: ModelKind, channels: usize, seed: u64) -> ModelParams {
    assert!(channels >= 1, "a model needs at least one channel");
    let mut p = ModelParams::zeros(kind, channels);
    let layout = p.layout();
    let mut rng = rng::stream(seed, "init", kind.as_str());
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, values: &mut [f64]| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[range] {
            *v = f64::from(rng.gen_range(-bound..=bound) as f32);
        }
    };
    for b in &layout.branches {
        fill(b.weights..b.biases, b.channel_count * TAPS, &mut p.values);
    }
    fill(layout.linear..layout.linear_bias, layout.features(), &mut p.values);
    p
}

/// A tile's pixels converted once to `f64` for repeated scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ModelInput {
    /// Pixels are taken as-is: impute first.
    pub fn from_tile(tile: &Tile) -> Self {
        Self {
            channels: tile.channels(),
            height: tile.height(),
            width: tile.width(),
            data: tile.pixels().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn from_raw(
        (channels, height, width): (usize, usize, usize),
        data: Vec<f64>,
    ) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    fn check(&self, channels: usize) -> Result<(), ModelError> {
        if self.channels != channels {
            return Err(ModelError::Channels {
                expected: channels,
                found: self.channels,
            });
        }
        if self.height < KERNEL || self.width < KERNEL {
            return Err(ModelError::TooSmall {
                height: self.height,
                width: self.width,
            });
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-filter pre-activation maps of one branch, `FILTERS × oh × w`.
///
/// Rows keep the input width so each tap is one contiguous pass; the last
/// `KERNEL - 1` columns of every row wrap around and are ignored.
fn convolve(params: &[f64], b: &BranchLayout, input: &ModelInput, out: &mut Vec<f64>) {
    let (h, w) = (input.height, input.width);
    let oh = h - KERNEL + 1;
    let plane = h * w;
    let span = oh * w - (KERNEL - 1);
    out.clear();
    out.resize(FILTERS * oh * w, 0.0);
    for f in 0..FILTERS {
        let map = &mut out[f * oh * w..(f + 1) * oh * w];
        map.fill(params[b.biases + f]);
        let map = &mut map[..span];
        for c in 0..b.channel_count {
            let chan = &input.data[(b.first_channel + c) * plane..(b.first_channel + c + 1) * plane];
            let kernel = &params[b.weights + (f * b.channel_count + c) * TAPS..][..TAPS];
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let k = kernel[dy * KERNEL + dx];
                    let src = &chan[dy * w + dx..][..span];
                    for (d, s) in map.iter_mut().zip(src) {
                        *d += k * s;
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut a4 = a.chunks_exact(4);
    let mut b4 = b.chunks_exact(4);
    for (x, y) in (&mut a4).zip(&mut b4) {
        for lane in 0..4 {
            acc[lane] += x[lane] * y[lane];
        }
    }
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `Σ_i weights[i] · chan[i + dy·w + dx]` for every kernel tap, with
/// `weights` in the row layout of [`convolve`] and zero on wrapped columns.
fn correlate(weights: &[f64], chan: &[f64], w: usize) -> [f64; TAPS] {
    let span = weights.len() - (KERNEL - 1);
    let mut out = [0.0; TAPS];
    for dy in 0..KERNEL {
        for dx in 0..KERNEL {
            out[dy * KERNEL + dx] = dot(&weights[..span], &chan[dy * w + dx..][..span]);
        }
    }
    out
}

/// Per-branch maps from the latest forward pass: pre-activations and
/// `√(x² + b)` of each, shared by the activation and its derivative.
struct Scratch {
    pre: Vec<Vec<f64>>,
    root: Vec<Vec<f64>>,
}

impl Scratch {
    fn new() -> Self {
        Self {
            pre: Vec::new(),
            root: Vec::new(),
        }
    }
}

/// Pooled features and the logit for one input.
fn features_and_logit(params: &ModelParams, layout: &Layout, input: &ModelInput, scratch: &mut Scratch) -> (Vec<f64>, f64) {
    let (w, ow) = (input.width, input.width - KERNEL + 1);
    let positions = ((input.height - KERNEL + 1) * ow) as f64;
    let mut feats = Vec::with_capacity(layout.features());
    scratch.pre.resize_with(layout.branches.len(), Vec::new);
    scratch.root.resize_with(layout.branches.len(), Vec::new);
    for ((b, pre), root) in layout.branches.iter().zip(&mut scratch.pre).zip(&mut scratch.root) {
        convolve(&params.values, b, input, pre);
        root.clear();
        root.extend(pre.iter().map(|&x| (x * x + SQUAREPLUS_B).sqrt()));
        let n = pre.len() / FILTERS;
        for f in 0..FILTERS {
            let mut sum = 0.0;
            for (xs, rs) in pre[f * n..(f + 1) * n].chunks_exact(w).zip(root[f * n..(f + 1) * n].chunks_exact(w)) {
                sum += xs[..ow].iter().zip(&rs[..ow]).map(|(x, r)| x + r).sum::<f64>();
            }
            feats.push(0.5 * sum / positions);
        }
    }
    let logit = params.values[layout.linear_bias]
        + feats
            .iter()
            .zip(&params.values[layout.linear..layout.linear_bias])
            .map(|(a, b)| a * b)
            .sum::<f64>();
    (feats, logit)
}

/// Pre-sigmoid output.
pub fn logit(params: &ModelParams, input: &ModelInput) -> Result<f64, ModelError> {
    input.check(params.channels)?;
    Ok(features_and_logit(params, &params.layout(), input, &mut Scratch::new()).1)
}

/// Plume score in `(0, 1)` for an already imputed input.
pub fn forward(params: &ModelParams, input: &ModelInput) -> Result<f64, ModelError> {
    logit(params, input).map(sigmoid)
}

/// [`forward`] on a tile, which must already be imputed.
pub fn forward_tile(params: &ModelParams, tile: &Tile) -> Result<f64, ModelError> {
    forward(params, &ModelInput::from_tile(tile))
}

/// Mean binary cross-entropy and its analytic gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&ModelInput],
    labels: &[bool],
) -> Result<(f64, ModelParams), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if batch.len() != labels.len() {
        return Err(ModelError::LengthMismatch {
            inputs: batch.len(),
            labels: labels.len(),
        });
    }
    for input in batch {
        input.check(params.channels)?;
    }
    let layout = params.layout();
    let mut grad = ModelParams::zeros(params.kind, params.channels);
    let mut scratch = Scratch::new();
    let mut slope = Vec::new();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (input, &y) in batch.iter().zip(labels) {
        let (h, w) = (input.height, input.width);
        let (oh, ow) = (h - KERNEL + 1, w - KERNEL + 1);
        let positions = (oh * ow) as f64;
        let plane = h * w;
        let (feats, z) = features_and_logit(params, &layout, input, &mut scratch);
        let target = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - target * z;
        let g = (sigmoid(z) - target) * scale;

        for (j, f) in feats.iter().enumerate() {
            grad.values[layout.linear + j] += g * f;
        }
        grad.values[layout.linear_bias] += g;

        for (bi, b) in layout.branches.iter().enumerate() {
            slope.clear();
            slope.extend(
                scratch.pre[bi]
                    .iter()
                    .zip(&scratch.root[bi])
                    .map(|(&x, &r)| 0.5 + 0.5 * x / r),
            );
            for row in slope.chunks_exact_mut(w) {
                row[ow..].fill(0.0);
            }
            for f in 0..FILTERS {
                let coef = g * params.values[layout.linear + bi * FILTERS + f] / positions;
                let s = &slope[f * oh * w..(f + 1) * oh * w];
                grad.values[b.biases + f] += coef * s.iter().sum::<f64>();
                for c in 0..b.channel_count {
                    let chan = &input.data
                        [(b.first_channel + c) * plane..(b.first_channel + c + 1) * plane];
                    let taps = correlate(s, chan, w);
                    let dst = &mut grad.values[b.weights + (f * b.channel_count + c) * TAPS..][..TAPS];
                    for (d, t) in dst.iter_mut().zip(taps) {
                        *d += coef * t;
                    }
                }
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Mean loss only, used for monitoring and finite-difference checks.
pub fn loss(params: &ModelParams, batch: &[&ModelInput], labels: &[bool]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if batch.len() != labels.len() {
        return Err(ModelError::LengthMismatch {
            inputs: batch.len(),
            labels: labels.len(),
        });
    }
    let layout = params.layout();
    let mut scratch = Scratch::new();
    let mut total = 0.0;
    for (input, &y) in batch.iter().zip(labels) {
        input.check(params.channels)?;
        let z = features_and_logit(params, &layout, input, &mut scratch).1;
        total += softplus(z) - if y { z } else { 0.0 };
    }
    Ok(total / batch.len() as f64)
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub imputation: ImputationStrategy,
    pub resample: bool,
    pub bins: BinSpec,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            imputation: ImputationStrategy::new(ImputationKind::Zero),
            resample: false,
            bins: BinSpec::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        if !(self.imputation.noise_scale >= 0.0 && self.imputation.noise_scale.is_finite()) {
            return Err(ModelError::Config("noise_scale must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ModelError::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Impute every tile with `strategy` and convert it for the model.
pub fn prepare_inputs(tiles: &[Tile], strategy: ImputationStrategy, seed: u64) -> Vec<ModelInput> {
    tiles
        .iter()
        .map(|t| ModelInput::from_tile(&impute(t, strategy, seed).tile))
        .collect()
}

pub fn train(ds: &Dataset, kind: ModelKind, cfg: &TrainConfig) -> Result<ModelParams, ModelError> {
    train_with(ds, kind, cfg, |_, _| {})
}

/// [`train`], calling `on_epoch(epoch, params)` after every epoch.
///
/// Tiles are imputed once with `cfg.seed`. Each epoch visits `len(ds)`
/// tiles: a fresh permutation without resampling, or draws from the
/// coverage-binned plan with it. Minibatch SGD follows.
pub fn train_with(
    ds: &Dataset,
    kind: ModelKind,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams),
) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let labels = ds
        .tiles()
        .iter()
        .map(|t| t.label().ok_or_else(|| ModelError::Unlabeled(t.id().to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut params = init_params(kind, ds.channels(), rng::derive_seed(cfg.seed, "init", 0));
    if cfg.epochs == 0 || ds.is_empty() {
        return Ok(params);
    }
    let inputs = prepare_inputs(ds.tiles(), cfg.imputation, cfg.seed);
    let plan = if cfg.resample {
        Some(build_plan(ds, cfg.bins)?)
    } else {
        None
    };

    let n = ds.len();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let order = match &plan {
            Some(plan) => draw_epoch(plan, n, rng::derive_seed(cfg.seed, "epoch", epoch as u64)),
            None => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng::stream(cfg.seed, "shuffle", &epoch.to_string()));
                idx
            }
        };
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch_labels.clear();
            batch.extend(chunk.iter().map(|&i| &inputs[i]));
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (_, grad) = loss_and_grad(&params, &batch, &batch_labels)?;
            for (p, g) in params.values.iter_mut().zip(&grad.values) {
                *p = f64::from((*p - cfg.learning_rate * g) as f32);
            }
        }
        on_epoch(epoch, &params);
    }
    Ok(params)
}

const CHECKPOINT_FORMAT: &str = "covbias-model";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    kind: ModelKind,
    channels: usize,
    param_count: usize,
    payload: String,
    shapes: Vec<TensorShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorShape {
    name: String,
    dims: Vec<usize>,
}

/// Write a TOML manifest at `path` and little-endian `f32` parameters
/// next to it (`model.ckpt` -> `model.bin`).
pub fn save_checkpoint(
    params: &ModelParams,
    cfg: Option<&TrainConfig>,
    path: &Path,
) -> Result<(), ModelError> {
    let err = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let payload = path.with_extension("bin");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        kind: params.kind,
        channels: params.channels,
        param_count: params.len(),
        payload: payload
            .file_name()
            .ok_or_else(|| err("path has no file name".into()))?
            .to_string_lossy()
            .into_owned(),
        shapes: params
            .layout()
            .shapes()
            .into_iter()
            .map(|(name, dims)| TensorShape { name, dims })
            .collect(),
        train_config: cfg.cloned(),
    };
    let text = toml::to_string(&manifest).map_err(|e| err(e.to_string()))?;
    let bytes: Vec<u8> = params
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&payload, bytes).map_err(|e| err(e.to_string()))?;
    fs::write(path, text).map_err(|e| err(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<TrainConfig>), ModelError> {
    let err = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(err(format!("unsupported format {} v{}", m.format, m.version)));
    }
    if m.channels == 0 {
        return Err(err("channels must be positive".into()));
    }
    let layout = Layout::new(m.kind, m.channels);
    if m.param_count != layout.len {
        return Err(err(format!(
            "param_count {} does not match a {} model over {} channels ({})",
            m.param_count, m.kind, m.channels, layout.len
        )));
    }
    let expected_shapes: Vec<TensorShape> = layout
        .shapes()
        .into_iter()
        .map(|(name, dims)| TensorShape { name, dims })
        .collect();
    if m.shapes != expected_shapes {
        return Err(err("tensor shapes do not match the model kind".into()));
    }
    let payload = path.parent().unwrap_or_else(|| Path::new(".")).join(&m.payload);
    let bytes = fs::read(&payload).map_err(|e| err(e.to_string()))?;
    if bytes.len() != 4 * layout.len {
        return Err(err(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            4 * layout.len
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok((
        ModelParams {
            kind: m.kind,
            channels: m.channels,
            values,
        },
        m.train_config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ModelInput {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..2.0)).collect();
        ModelInput::from_raw((c, h, w), data).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(init_params(ModelKind::Vanilla, 3, 0).len(), 4 * 3 * 9 + 4 + 4 + 1);
        assert_eq!(init_params(ModelKind::Vanilla, 3, 0).len(), 117);
        assert_eq!(
            init_params(ModelKind::MultiBranch, 3, 0).len(),
            (4 * 9 + 4) + (4 * 2 * 9 + 4) + 8 + 1
        );
        assert_eq!(init_params(ModelKind::MultiBranch, 1, 0).len(), 4 * 9 + 4 + 4 + 1);
        for kind in ModelKind::ALL {
            assert!(init_params(kind, 8, 0).len() <= 10_000);
        }
    }

    #[test]
    fn init_is_seeded_bounded_and_f32_exact() {
        for kind in ModelKind::ALL {
            let a = init_params(kind, 3, 1);
            assert_eq!(a, init_params(kind, 3, 1));
            assert_ne!(a, init_params(kind, 3, 2));
            let layout = a.layout();
            for &v in a.values() {
                assert_eq!(v, f64::from(v as f32));
            }
            for b in &layout.branches {
                let bound = 1.0 / ((b.channel_count * TAPS) as f64).sqrt() + 1e-7;
                assert!(a.values()[b.weights..b.biases].iter().all(|v| v.abs() <= bound));
                assert!(a.values()[b.biases..b.biases + FILTERS].iter().all(|&v| v == 0.0));
            }
            assert_eq!(a.values()[layout.linear_bias], 0.0);
        }
    }

    #[test]
    fn zero_model_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 3, 32, 32);
        for kind in ModelKind::ALL {
            let p = ModelParams::zeros(kind, 3);
            assert_eq!(forward(&p, &x).unwrap(), 0.5);
        }
    }

    #[test]
    fn logit_is_linear_in_last_layer_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input(&mut rng, 3, 16, 16);
        let p = init_params(ModelKind::Vanilla, 3, 9);
        let z1 = logit(&p, &x).unwrap();
        let mut q = p.clone();
        q.linear_weights_mut().iter_mut().for_each(|w| *w *= 3.0);
        let z3 = logit(&q, &x).unwrap();
        // linear bias is zero at init
        assert!((z3 - 3.0 * z1).abs() < 1e-12 * z1.abs().max(1.0));
        let s1 = forward(&p, &x).unwrap();
        let s3 = forward(&q, &x).unwrap();
        assert_eq!((s3 - s1).signum(), z1.signum());
    }

    #[test]
    fn forward_is_bit_stable_and_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 3, 32, 32);
        let p = init_params(ModelKind::MultiBranch, 3, 1);
        assert_eq!(
            forward(&p, &x).unwrap().to_bits(),
            forward(&p, &x).unwrap().to_bits()
        );
        let mut bad = x.clone();
        bad.data[7] = f64::INFINITY;
        assert!(matches!(forward(&p, &bad), Err(ModelError::NonFinite(7))));
        let small = random_input(&mut rng, 3, 2, 8);
        assert!(matches!(forward(&p, &small), Err(ModelError::TooSmall { .. })));
        let wrong = random_input(&mut rng, 2, 8, 8);
        assert!(matches!(forward(&p, &wrong), Err(ModelError::Channels { .. })));
    }

    #[test]
    fn loss_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_input(&mut rng, 3, 8, 8);
        let p = ModelParams::zeros(ModelKind::Vanilla, 3);
        let (l, _) = loss_and_grad(&p, &[&x, &x], &[true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let mut confident = ModelParams::zeros(ModelKind::Vanilla, 3);
        let lb = confident.layout().linear_bias;
        confident.values_mut()[lb] = 60.0;
        let (l, _) = loss_and_grad(&confident, &[&x], &[true]).unwrap();
        assert!(l < 1e-20);
        assert!(matches!(
            loss_and_grad(&p, &[], &[]),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn loss_matches_loss_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<ModelInput> = (0..3).map(|_| random_input(&mut rng, 3, 10, 12)).collect();
        let batch: Vec<&ModelInput> = xs.iter().collect();
        let labels = [true, false, true];
        for kind in ModelKind::ALL {
            let p = init_params(kind, 3, 2);
            let a = loss(&p, &batch, &labels).unwrap();
            let (b, _) = loss_and_grad(&p, &batch, &labels).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            let path = dir.path().join(format!("{kind}.ckpt"));
            let p = init_params(kind, 3, 12);
            let cfg = TrainConfig {
                resample: true,
                ..TrainConfig::default()
            };
            save_checkpoint(&p, Some(&cfg), &path).unwrap();
            let (q, c) = load_checkpoint(&path).unwrap();
            assert_eq!(q, p);
            assert_eq!(c, Some(cfg));
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&init_params(ModelKind::Vanilla, 3, 0), None, &path).unwrap();
        fs::write(path.with_extension("bin"), [0u8; 12]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn kind_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("resnet".parse::<ModelKind>().is_err());
    }

    fn random_params(rng: &mut ChaCha8Rng, kind: ModelKind, channels: usize) -> ModelParams {
        let mut p = ModelParams::zeros(kind, channels);
        p.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.6..0.6));
        p
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-4;
        for kind in ModelKind::ALL {
            for _ in 0..20 {
                let c = rng.gen_range(1..=4);
                let (ih, iw) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
                let n = rng.gen_range(1..=4);
                let inputs: Vec<ModelInput> = (0..n).map(|_| random_input(&mut rng, c, ih, iw)).collect();
                let batch: Vec<&ModelInput> = inputs.iter().collect();
                let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
                let p = random_params(&mut rng, kind, c);
                let (_, grad) = loss_and_grad(&p, &batch, &labels).unwrap();
                for i in 0..p.len() {
                    let mut plus = p.clone();
                    plus.values_mut()[i] += h;
                    let mut minus = p.clone();
                    minus.values_mut()[i] -= h;
                    let numeric = (loss(&plus, &batch, &labels).unwrap() - loss(&minus, &batch, &labels).unwrap()) / (2.0 * h);
                    let analytic = grad.values()[i];
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{kind} c={c} {ih}x{iw} param {i}: {analytic} vs {numeric}");
                }
            }
        }
    }

    fn separable_set(n: usize) -> Dataset {
        let mut cfg = crate::synthgen::GenConfig {
            n_tiles: n,
            clear_fraction: 1.0,
            seed: 8,
            ..crate::synthgen::GenConfig::default()
        };
        cfg.appearance.noise_sigma = 0.0;
        cfg.appearance.plume_amplitude = (2.0, 3.0);
        crate::synthgen::generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let ds = separable_set(8);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let p = train(&ds, ModelKind::Vanilla, &cfg).unwrap();
        assert_eq!(p, init_params(ModelKind::Vanilla, 3, rng::derive_seed(4, "init", 0)));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable_set(64);
        for resample in [false, true] {
            let cfg = TrainConfig {
                epochs: 3,
                seed: 9,
                resample,
                imputation: ImputationStrategy::new(ImputationKind::PixelSample),
                ..TrainConfig::default()
            };
            let a = train(&ds, ModelKind::MultiBranch, &cfg).unwrap();
            assert_eq!(a, train(&ds, ModelKind::MultiBranch, &cfg).unwrap());
            assert_ne!(a, train(&ds, ModelKind::MultiBranch, &TrainConfig { seed: 10, ..cfg }).unwrap());
            assert!(a.values().iter().all(|&v| v == f64::from(v as f32)));
        }
    }

    #[test]
    fn separable_toy_set_is_learned_with_descending_loss() {
        let ds = separable_set(256);
        let cfg = TrainConfig {
            seed: 2,
            ..TrainConfig::default()
        };
        let inputs = prepare_inputs(ds.tiles(), cfg.imputation, cfg.seed);
        let batch: Vec<&ModelInput> = inputs.iter().collect();
        let labels: Vec<bool> = ds.tiles().iter().map(|t| t.label().unwrap()).collect();
        for kind in ModelKind::ALL {
            let mut losses = vec![loss(&init_params(kind, 3, rng::derive_seed(2, "init", 0)), &batch, &labels).unwrap()];
            let p = train_with(&ds, kind, &cfg, |_, p| losses.push(loss(p, &batch, &labels).unwrap())).unwrap();
            assert_eq!(losses.len(), cfg.epochs + 1);
            let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
            assert!(violations as f64 <= 0.05 * cfg.epochs as f64, "{kind}: {violations} rising epochs in {losses:?}");
            let scores: Vec<f64> = batch.iter().map(|x| forward(&p, x).unwrap()).collect();
            let cm = crate::metrics::confusion(&scores, &labels, 0.5).unwrap();
            let bacc = crate::metrics::balanced_accuracy(&cm).value().unwrap();
            assert!(bacc >= 0.95, "{kind}: training BAcc {bacc}");
        }
    }
}
