//! Residual MLP feature extractor with hand-written backpropagation, Adam
//! with coupled L2 weight decay, and the ordinal training loop.
//!
//! Architecture: a linear stem with PReLU, `num_blocks` residual blocks
//! `x + PReLU(W₂ PReLU(W₁x + b₁) + b₂)`, `tail_layers` linear layers without
//! activation ending at `feature_dim`, and a bias-free classifier `z = wᵀh`.
//! Each PReLU has a single learnable slope.
//!
//! All parameters live in one flat vector; layers are views into it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clm::{batch_nll, batch_nll_grad, threshold_param_grad, ThresholdParams, Thresholds};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::link::LinkKind;
use crate::metrics::{self, FeatureBatch, OncReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Zero when the caller fills it in from the data.
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    #[serde(default = "default_tail")]
    pub tail_layers: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_prelu")]
    pub prelu_init: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    32
}
fn default_blocks() -> usize {
    2
}
fn default_tail() -> usize {
    3
}
fn default_feature_dim() -> usize {
    16
}
fn default_prelu() -> f64 {
    0.25
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl MlpConfig {
    /// Desk-scale shape: width 32, two blocks, three tail layers, 16 features.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            width: default_width(),
            num_blocks: default_blocks(),
            tail_layers: default_tail(),
            feature_dim: default_feature_dim(),
            prelu_init: default_prelu(),
            seed: 0,
        }
    }

    /// Width 128, four blocks, three tail layers, 64 features.
    pub fn full(input_dim: usize) -> Self {
        Self {
            width: 128,
            num_blocks: 4,
            feature_dim: 64,
            ..Self::desk(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("network dimensions must be at least 1"));
        }
        if self.tail_layers == 0 {
            return Err(Error::invalid("tail_layers must be at least 1 to reach feature_dim"));
        }
        if !self.prelu_init.is_finite() {
            return Err(Error::invalid("prelu_init must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LinearSlot {
    weight: usize,
    bias: usize,
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockSlot {
    first: LinearSlot,
    first_act: usize,
    second: LinearSlot,
    second_act: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: LinearSlot,
    stem_act: usize,
    blocks: Vec<BlockSlot>,
    tail: Vec<LinearSlot>,
    classifier: usize,
    len: usize,
}

impl Layout {
    fn new(c: &MlpConfig) -> Self {
        let mut next = 0;
        let mut linear = |inp: usize, out: usize| {
            let slot = LinearSlot {
                weight: next,
                bias: next + out * inp,
                out,
                inp,
            };
            next += out * inp + out;
            slot
        };
        let stem = linear(c.input_dim, c.width);
        let mut blocks = Vec::new();
        let mut acts = Vec::new();
        for _ in 0..c.num_blocks {
            let first = linear(c.width, c.width);
            let second = linear(c.width, c.width);
            blocks.push((first, second));
        }
        let tail: Vec<LinearSlot> = (0..c.tail_layers)
            .map(|k| {
                let out = if k + 1 == c.tail_layers { c.feature_dim } else { c.width };
                linear(c.width, out)
            })
            .collect();
        let stem_act = next;
        next += 1;
        for _ in 0..2 * c.num_blocks {
            acts.push(next);
            next += 1;
        }
        let classifier = next;
        next += c.feature_dim;
        Self {
            stem,
            stem_act,
            blocks: blocks
                .into_iter()
                .enumerate()
                .map(|(k, (first, second))| BlockSlot {
                    first,
                    first_act: acts[2 * k],
                    second,
                    second_act: acts[2 * k + 1],
                })
                .collect(),
            tail,
            classifier,
            len: next,
        }
    }

    fn linears(&self) -> Vec<LinearSlot> {
        let mut v = vec![self.stem];
        for b in &self.blocks {
            v.push(b.first);
            v.push(b.second);
        }
        v.extend(&self.tail);
        v
    }

    fn acts(&self) -> Vec<usize> {
        let mut v = vec![self.stem_act];
        for b in &self.blocks {
            v.push(b.first_act);
            v.push(b.second_act);
        }
        v
    }
}

/// Network parameters. Every mutable access bumps a generation counter so
/// a forward cache from older parameters is rejected by `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    layout: Layout,
    values: Vec<f64>,
    generation: u64,
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    generation: u64,
    input: Array2<f64>,
    stem_pre: Array2<f64>,
    blocks: Vec<BlockCache>,
    tail_inputs: Vec<Array2<f64>>,
    features: Array2<f64>,
}

impl Cache {
    /// Which PReLU inputs are on the identity side, in a fixed order.
    fn active_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.stem_pre.iter().map(|&u| u > 0.0).collect();
        for b in &self.blocks {
            out.extend(b.first_pre.iter().chain(b.second_pre.iter()).map(|&u| u > 0.0));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    first_pre: Array2<f64>,
    first_out: Array2<f64>,
    second_pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Penultimate features, one row per input.
    pub features: Array2<f64>,
    pub latents: Array1<f64>,
    pub cache: Cache,
}

fn prelu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Returns the input gradient and accumulates the slope gradient.
fn prelu_back(pre: &Array2<f64>, slope: f64, grad_out: &Array2<f64>, grad_slope: &mut f64) -> Array2<f64> {
    let mut out = grad_out.clone();
    for (g, &u) in out.iter_mut().zip(pre.iter()) {
        if u <= 0.0 {
            *grad_slope += *g * u;
            *g *= slope;
        }
    }
    out
}

impl MlpParams {
    /// Fan-in uniform weights `U(-1/√fan_in, 1/√fan_in)` (classifier
    /// included), zero biases, PReLU slopes at `prelu_init`.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config)?;
        let mut rng = crate::rng::seeded(config.seed);
        for slot in p.layout.linears() {
            let bound = 1.0 / (slot.inp as f64).sqrt();
            for v in &mut p.values[slot.weight..slot.weight + slot.out * slot.inp] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (config.feature_dim as f64).sqrt();
        let c = p.layout.classifier;
        for v in &mut p.values[c..c + config.feature_dim] {
            *v = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    /// All weights, biases and the classifier zero; slopes at `prelu_init`.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut values = vec![0.0; layout.len];
        for a in layout.acts() {
            values[a] = config.prelu_init;
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
            generation: 0,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.values
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn classifier(&self) -> ArrayView1<'_, f64> {
        let c = self.layout.classifier;
        ArrayView1::from(&self.values[c..c + self.config.feature_dim])
    }

    /// PReLU slopes in network order (stem, then each block's two).
    pub fn slopes(&self) -> Vec<f64> {
        self.layout.acts().iter().map(|&a| self.values[a]).collect()
    }

    /// Set the second weight matrix of block `k` (row-major, `width × width`).
    pub fn set_block_second_weight(&mut self, k: usize, weight: &[f64]) -> Result<()> {
        let slot = self
            .layout
            .blocks
            .get(k)
            .ok_or_else(|| Error::invalid("block index out of range"))?
            .second;
        if weight.len() != slot.out * slot.inp {
            return Err(Error::LengthMismatch {
                what: "block weight",
                left: weight.len(),
                right: slot.out * slot.inp,
            });
        }
        self.values_mut()[slot.weight..slot.weight + weight.len()].copy_from_slice(weight);
        Ok(())
    }

    fn weight(&self, s: LinearSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.out, s.inp), &self.values[s.weight..s.weight + s.out * s.inp]).expect("layout")
    }

    fn bias(&self, s: LinearSlot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[s.bias..s.bias + s.out])
    }

    fn linear(&self, s: LinearSlot, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight(s).t()) + self.bias(s)
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::LengthMismatch {
                what: "input columns vs input_dim",
                left: x.ncols(),
                right: self.config.input_dim,
            });
        }
        let input = x.to_owned();
        let stem_pre = self.linear(self.layout.stem, &input);
        let mut h = prelu(&stem_pre, self.values[self.layout.stem_act]);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let first_pre = self.linear(b.first, &h);
            let first_out = prelu(&first_pre, self.values[b.first_act]);
            let second_pre = self.linear(b.second, &first_out);
            let out = &h + &prelu(&second_pre, self.values[b.second_act]);
            blocks.push(BlockCache {
                input: h,
                first_pre,
                first_out,
                second_pre,
            });
            h = out;
        }
        let mut tail_inputs = Vec::with_capacity(self.layout.tail.len());
        for &t in &self.layout.tail {
            let next = self.linear(t, &h);
            tail_inputs.push(h);
            h = next;
        }
        let latents = h.dot(&self.classifier());
        Ok(Forward {
            features: h.clone(),
            latents,
            cache: Cache {
                generation: self.generation,
                input,
                stem_pre,
                blocks,
                tail_inputs,
                features: h,
            },
        })
    }

    /// Single-input forward pass returning `(h, z)`.
    pub fn forward_one(&self, x: &[f64]) -> Result<(Array1<f64>, f64)> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
        let f = self.forward(view)?;
        Ok((f.features.row(0).to_owned(), f.latents[0]))
    }

    /// Gradient of `Σ_i dz_i · z_i` with respect to every parameter, in the
    /// flat layout of [`MlpParams::values`].
    pub fn backward(&self, cache: &Cache, dz: ArrayView1<f64>) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.generation,
            });
        }
        if dz.len() != cache.features.nrows() {
            return Err(Error::LengthMismatch {
                what: "latent gradient vs batch",
                left: dz.len(),
                right: cache.features.nrows(),
            });
        }
        let mut g = vec![0.0; self.values.len()];
        let c = self.layout.classifier;
        let gw = cache.features.t().dot(&dz);
        g[c..c + gw.len()].copy_from_slice(gw.as_slice().expect("contiguous"));

        let dzc = dz.insert_axis(Axis(1));
        let mut dx = dzc.dot(&self.classifier().insert_axis(Axis(0)));

        for (t, input) in self.layout.tail.iter().zip(&cache.tail_inputs).rev() {
            dx = self.linear_back(*t, input, &dx, &mut g);
        }
        for (b, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            let mut ds = 0.0;
            let d_second = prelu_back(&bc.second_pre, self.values[b.second_act], &dx, &mut ds);
            g[b.second_act] += ds;
            let d_first_out = self.linear_back(b.second, &bc.first_out, &d_second, &mut g);
            let mut ds = 0.0;
            let d_first = prelu_back(&bc.first_pre, self.values[b.first_act], &d_first_out, &mut ds);
            g[b.first_act] += ds;
            let through = self.linear_back(b.first, &bc.input, &d_first, &mut g);
            dx = dx + through;
        }
        let mut ds = 0.0;
        let d_stem = prelu_back(&cache.stem_pre, self.values[self.layout.stem_act], &dx, &mut ds);
        g[self.layout.stem_act] += ds;
        self.linear_back(self.layout.stem, &cache.input, &d_stem, &mut g);
        Ok(g)
    }

    fn linear_back(&self, s: LinearSlot, input: &Array2<f64>, grad_out: &Array2<f64>, g: &mut [f64]) -> Array2<f64> {
        let gw = grad_out.t().dot(input);
        for (dst, src) in g[s.weight..s.weight + s.out * s.inp].iter_mut().zip(gw.iter()) {
            *dst += src;
        }
        let gb = grad_out.sum_axis(Axis(0));
        for (dst, src) in g[s.bias..s.bias + s.out].iter_mut().zip(gb.iter()) {
            *dst += src;
        }
        grad_out.dot(&self.weight(s))
    }
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update on `grad + weight_decay·params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "optimizer state vs parameters",
                left: self.m.len(),
                right: params.len().min(grad.len()),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let gi = grad[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    #[default]
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    /// Epochs after which the rate is multiplied by `lr_decay_factor`.
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default = "default_half_range")]
    pub half_range: f64,
    /// Initial softplus parameters for learnable thresholds (zeros if absent).
    #[serde(default)]
    pub initial_s: Option<Vec<f64>>,
    #[serde(default, rename = "link")]
    pub kind: LinkKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    500
}
fn default_lr() -> f64 {
    1e-2
}
fn default_decay_epochs() -> Vec<usize> {
    vec![100, 250, 400]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_batch() -> usize {
    256
}
fn default_weight_decay() -> f64 {
    5e-3
}
fn default_half_range() -> f64 {
    20.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            base_lr: default_lr(),
            lr_decay_epochs: default_decay_epochs(),
            lr_decay_factor: default_decay_factor(),
            batch_size: default_batch(),
            weight_decay: default_weight_decay(),
            threshold_mode: ThresholdMode::Fixed,
            half_range: default_half_range(),
            initial_s: None,
            kind: LinkKind::Logit,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 5000 epochs, decays after 200, 800 and 3000, batch 2048.
    pub fn full() -> Self {
        Self {
            epochs: 5000,
            lr_decay_epochs: vec![200, 800, 3000],
            batch_size: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lr_decay_epochs must be strictly increasing"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.threshold_mode == ThresholdMode::Fixed && !(self.half_range > 0.0 && self.half_range.is_finite()) {
            return Err(Error::invalid("half_range must be positive"));
        }
        Ok(())
    }

    /// Rate used during `epoch` (1-based); epoch 0 reports the base rate.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: SplitName,
    pub report: OncReport,
    pub lr: f64,
}

/// Current cut points, fixed or parameterized.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdState {
    Fixed(Thresholds),
    Learnable(ThresholdParams),
}

impl ThresholdState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        match cfg.threshold_mode {
            ThresholdMode::Fixed => Ok(Self::Fixed(Thresholds::fixed(num_classes, cfg.half_range)?)),
            ThresholdMode::Learnable => {
                let p = match &cfg.initial_s {
                    Some(s) => {
                        if s.len() + 1 != num_classes {
                            return Err(Error::LengthMismatch {
                                what: "initial_s vs classes - 1",
                                left: s.len(),
                                right: num_classes - 1,
                            });
                        }
                        ThresholdParams::new(s.clone())?
                    }
                    None => ThresholdParams::zeros(num_classes)?,
                };
                Ok(Self::Learnable(p))
            }
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        match self {
            Self::Fixed(t) => t.clone(),
            Self::Learnable(p) => p.to_thresholds(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NnRun {
    pub params: MlpParams,
    pub thresholds: ThresholdState,
    pub history: Vec<EpochRecord>,
}

impl NnRun {
    pub fn last(&self, split: SplitName) -> Option<&EpochRecord> {
        self.history.iter().rev().find(|r| r.split == split)
    }
}

/// Full-batch evaluation of every indicator on `data`.
pub fn evaluate(params: &MlpParams, thr: &Thresholds, kind: LinkKind, data: &Dataset) -> Result<OncReport> {
    let f = params.forward(data.inputs.view())?;
    let batch = FeatureBatch::new(f.features, data.labels.clone(), data.num_classes)?;
    metrics::report(&batch, params.classifier(), thr, kind)
}

/// Mini-batch training with seeded shuffling; the last partial batch is
/// kept. Metrics are recorded for epoch 0 and after every epoch.
pub fn train(mlp: &MlpConfig, cfg: &TrainConfig, train_set: &Dataset, validation: Option<&Dataset>) -> Result<NnRun> {
    train_with(mlp, cfg, train_set, validation, |_| {})
}

/// As [`train`], calling `on_epoch` with each new record.
pub fn train_with(
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<NnRun> {
    mlp.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if train_set.input_dim() != mlp.input_dim {
        return Err(Error::LengthMismatch {
            what: "dataset columns vs input_dim",
            left: train_set.input_dim(),
            right: mlp.input_dim,
        });
    }
    if let Some(v) = validation {
        if v.num_classes != train_set.num_classes || v.input_dim() != mlp.input_dim {
            return Err(Error::invalid("validation split differs in shape from training split"));
        }
    }
    let q = train_set.num_classes;
    let mut params = MlpParams::init(mlp)?;
    let mut thresholds = ThresholdState::new(cfg, q)?;
    let mut net_opt = Adam::new(params.len());
    let mut thr_opt = Adam::new(q.saturating_sub(1));
    let mut rng = crate::rng::stream(cfg.seed, 1);
    let mut history = Vec::new();

    let mut record =
        |epoch: usize, params: &MlpParams, thresholds: &ThresholdState, history: &mut Vec<EpochRecord>| -> Result<()> {
            let thr = thresholds.thresholds();
            let lr = cfg.lr_at(epoch);
            let mut push = |split, data: &Dataset| -> Result<()> {
                let rec = EpochRecord {
                    epoch,
                    split,
                    report: evaluate(params, &thr, cfg.kind, data)?,
                    lr,
                };
                on_epoch(&rec);
                history.push(rec);
                Ok(())
            };
            push(SplitName::Train, train_set)?;
            if let Some(v) = validation {
                if !v.is_empty() {
                    push(SplitName::Validation, v)?;
                }
            }
            Ok(())
        };
    record(0, &params, &thresholds, &mut history)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let fwd = params.forward(x.view())?;
            let thr = thresholds.thresholds();
            let bg = batch_nll_grad(cfg.kind, fwd.latents.as_slice().expect("contiguous"), &y, &thr)?;
            if !bg.mean.is_finite() {
                return Err(Error::Diverged {
                    step: epoch,
                    message: format!(
                        "non-finite loss in epoch {epoch}, batch {bi} ({} saturated samples)",
                        bg.saturated
                    ),
                });
            }
            let grad = params.backward(&fwd.cache, ArrayView1::from(&bg.latents))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: epoch,
                    message: format!("non-finite gradient in epoch {epoch}, batch {bi}"),
                });
            }
            net_opt.step(params.values_mut(), &grad, lr, cfg.weight_decay)?;
            if let ThresholdState::Learnable(p) = &mut thresholds {
                let gs = threshold_param_grad(p, &bg.thresholds);
                thr_opt.step(&mut p.s, &gs, lr, 0.0)?;
            }
        }
        record(epoch, &params, &thresholds, &mut history)?;
    }
    Ok(NnRun {
        params,
        thresholds,
        history,
    })
}

/// Outcome of comparing backpropagated gradients with finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub num_params: usize,
}

/// Check every parameter gradient of the mean batch loss against a
/// fourth-order central difference. The relative error of component `i` is
/// `|fd - g| / max(|fd|, |g|, 1e-8)`.
///
/// The step starts at `1e-3 * max(|θ_i|, 1)` and shrinks tenfold (at most
/// four times) while any stencil point flips a PReLU input across zero.
pub fn gradient_check(
    params: &MlpParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    thr: &Thresholds,
    kind: LinkKind,
) -> Result<GradCheck> {
    let eval = |p: &MlpParams| -> Result<(f64, Vec<bool>)> {
        let f = p.forward(x)?;
        let l = batch_nll(kind, f.latents.as_slice().expect("contiguous"), labels, thr)?;
        Ok((l, f.cache.active_pattern()))
    };
    let f = params.forward(x)?;
    let pattern = f.cache.active_pattern();
    let bg = batch_nll_grad(kind, f.latents.as_slice().expect("contiguous"), labels, thr)?;
    let g = params.backward(&f.cache, ArrayView1::from(&bg.latents))?;
    let mut probe = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        num_params: g.len(),
    };
    for (i, &gi) in g.iter().enumerate() {
        let base = params.values()[i];
        let mut h = 1e-3 * base.abs().max(1.0);
        let mut fd = 0.0;
        for attempt in 0..5 {
            let mut smooth = true;
            let mut at = |k: f64| -> Result<f64> {
                probe.values_mut()[i] = base + k * h;
                let (l, pat) = eval(&probe)?;
                smooth &= pat == pattern;
                Ok(l)
            };
            fd = (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * h);
            if smooth || attempt == 4 {
                break;
            }
            h /= 10.0;
        }
        probe.values_mut()[i] = base;
        let err = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-8);
        if err > out.max_rel_err {
            out.max_rel_err = err;
            out.worst_index = i;
        }
    }
    Ok(out)
}

/// Features of every row of `data`.
pub fn features(params: &MlpParams, data: &Dataset) -> Result<Array2<f64>> {
    Ok(params.forward(data.inputs.view())?.features)
}
