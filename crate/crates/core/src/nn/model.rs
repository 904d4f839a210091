//! The classification network: three conv+BN+ReLU layers, patch embedding
//! with a learned class token and positional embeddings, pre-norm
//! single-head transformer blocks, and a classifier head shared between the
//! class token and every patch token.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tape::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::seed::stream;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;

const TAG_INIT: u64 = 0x696e_6974; // "init"

/// Architecture hyperparameters. Also echoed into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 9 for a single band, 18 for the dual-band concatenation.
    pub in_channels: usize,
    /// Window side length s.
    pub window: usize,
    /// Patch side length p; `window % patch == 0`.
    pub patch: usize,
    /// Channel widths of the three conv layers.
    pub conv_channels: [usize; 3],
    /// Token dimension d.
    pub embed_dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            window: 12,
            patch: 3,
            conv_channels: [16, 32, 32],
            embed_dim: 64,
            depth: 2,
            mlp_ratio: 2,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.patch == 0 || self.window % self.patch != 0 {
            return Err(Error::config(format!(
                "window {} must be a positive multiple of patch {}",
                self.window, self.patch
            )));
        }
        if self.in_channels != 9 && self.in_channels != 18 {
            return Err(Error::config(format!(
                "in_channels must be 9 or 18, got {}",
                self.in_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes required"));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth, embed_dim, mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Number of patch tokens N = (s/p)^2.
    pub fn num_patches(&self) -> usize {
        let g = self.window / self.patch;
        g * g
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    TruncNormal,
    Zeros,
    Ones,
}

/// Declarative tensor layout for a config: shared by initialization and
/// checkpoint validation.
fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool, InitKind)> {
    use InitKind::*;
    let mut specs: Vec<(String, Vec<usize>, bool, InitKind)> = Vec::new();
    let mut ci = config.in_channels;
    for (i, &co) in config.conv_channels.iter().enumerate() {
        let l = i + 1;
        specs.push((format!("conv{l}.weight"), vec![co, 3, 3, ci], true, TruncNormal));
        specs.push((format!("conv{l}.bias"), vec![co], true, Zeros));
        specs.push((format!("conv{l}.bn.gamma"), vec![co], true, Ones));
        specs.push((format!("conv{l}.bn.beta"), vec![co], true, Zeros));
        specs.push((format!("conv{l}.bn.running_mean"), vec![co], false, Zeros));
        specs.push((format!("conv{l}.bn.running_var"), vec![co], false, Ones));
        ci = co;
    }
    let d = config.embed_dim;
    let plen = config.patch * config.patch * config.conv_channels[2];
    specs.push(("embed.weight".into(), vec![plen, d], true, TruncNormal));
    specs.push(("embed.bias".into(), vec![d], true, Zeros));
    specs.push(("cls".into(), vec![d], true, TruncNormal));
    specs.push(("pos".into(), vec![config.seq_len(), d], true, TruncNormal));
    for b in 0..config.depth {
        specs.push((format!("block{b}.ln1.gamma"), vec![d], true, Ones));
        specs.push((format!("block{b}.ln1.beta"), vec![d], true, Zeros));
        specs.push((format!("block{b}.attn.wq"), vec![d, d], true, TruncNormal));
        specs.push((format!("block{b}.attn.wk"), vec![d, d], true, TruncNormal));
        specs.push((format!("block{b}.attn.wv"), vec![d, d], true, TruncNormal));
        specs.push((format!("block{b}.attn.out.weight"), vec![d, d], true, TruncNormal));
        specs.push((format!("block{b}.attn.out.bias"), vec![d], true, Zeros));
        specs.push((format!("block{b}.ln2.gamma"), vec![d], true, Ones));
        specs.push((format!("block{b}.ln2.beta"), vec![d], true, Zeros));
        let hidden = d * config.mlp_ratio;
        specs.push((format!("block{b}.mlp.fc1.weight"), vec![d, hidden], true, TruncNormal));
        specs.push((format!("block{b}.mlp.fc1.bias"), vec![hidden], true, Zeros));
        specs.push((format!("block{b}.mlp.fc2.weight"), vec![hidden, d], true, TruncNormal));
        specs.push((format!("block{b}.mlp.fc2.bias"), vec![d], true, Zeros));
    }
    specs.push(("head.weight".into(), vec![d, config.num_classes], true, TruncNormal));
    specs.push(("head.bias".into(), vec![config.num_classes], true, Zeros));
    specs
}

/// Standard normal via Box-Muller, truncated to two standard deviations.
fn trunc_normal(rng: &mut impl rand::Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// All learnable tensors plus BN running statistics, in a fixed named order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: truncated-normal (std 0.02) projections, zero
    /// biases and BN shifts, unit BN scales and running variances. Each
    /// tensor draws from its own substream so initialization is independent
    /// of construction order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (idx, (name, shape, trainable, kind)) in tensor_specs(&config).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match kind {
                InitKind::Zeros => vec![T::zero(); n],
                InitKind::Ones => vec![T::one(); n],
                InitKind::TruncNormal => {
                    let mut rng = stream(seed, &[TAG_INIT, idx as u64]);
                    (0..n).map(|_| T::from_f64(trunc_normal(&mut rng, 0.02))).collect()
                }
            };
            tensors.push(ParamTensor { name, shape, data, trainable });
        }
        Ok(Self { config, tensors })
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown tensor '{name}'"))
    }

    pub fn tensor(&self, name: &str) -> &ParamTensor<T> {
        &self.tensors[self.index_of(name)]
    }

    /// Checks that tensor names and shapes match this config's layout.
    pub fn validate_layout(&self) -> Result<()> {
        let specs = tensor_specs(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, config expects {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for ((name, shape, trainable, _), t) in specs.iter().zip(&self.tensors) {
            if t.name != *name || t.shape != *shape || t.trainable != *trainable {
                return Err(Error::format(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    /// Exact widening copy, for 64-bit reference computations.
    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| x.as_f64()).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }
}

/// Handles into a built forward graph.
pub struct ForwardGraph {
    pub input: TensorId,
    /// `[B, 1, M]` class-token logits.
    pub cls_logits: TensorId,
    /// `[B, N, M]` per-patch logits from the shared head.
    pub patch_logits: TensorId,
    /// `[B, 1, M]` softmax of the class-token logits.
    pub cls_probs: TensorId,
    /// Tensor-table index -> tape leaf, for every trainable tensor.
    pub param_leaves: Vec<(usize, TensorId)>,
    /// Conv-layer index -> training-mode BN node, for running-stat updates.
    pub bn_nodes: Vec<(usize, TensorId)>,
}

struct Builder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: &'a ModelParams<T>,
    leaves: Vec<Option<TensorId>>,
    training: bool,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn leaf(&mut self, name: &str) -> Result<TensorId> {
        let idx = self.params.index_of(name);
        if let Some(id) = self.leaves[idx] {
            return Ok(id);
        }
        let t = &self.params.tensors[idx];
        let id = self
            .tape
            .leaf(&t.shape, t.data.clone(), t.name.clone(), t.trainable)?;
        self.leaves[idx] = Some(id);
        Ok(id)
    }

    fn running(&self, name: &str) -> Vec<f64> {
        self.params
            .tensor(name)
            .data
            .iter()
            .map(|&x| x.as_f64())
            .collect()
    }

    /// conv -> BN -> ReLU stack of three layers (channels 9/18 -> 16 -> 32 -> 32).
    fn early_cnn(&mut self, x: TensorId, bn_nodes: &mut Vec<(usize, TensorId)>) -> Result<TensorId> {
        let mut h = x;
        for l in 1..=3 {
            let w = self.leaf(&format!("conv{l}.weight"))?;
            let b = self.leaf(&format!("conv{l}.bias"))?;
            h = self.tape.conv2d(h, w, b, 1, format!("conv{l}"))?;
            let gamma = self.leaf(&format!("conv{l}.bn.gamma"))?;
            let beta = self.leaf(&format!("conv{l}.bn.beta"))?;
            h = if self.training {
                let bn = self
                    .tape
                    .batch_norm_train(h, gamma, beta, BN_EPS, format!("bn{l}"))?;
                bn_nodes.push((l - 1, bn));
                bn
            } else {
                let mean = self.running(&format!("conv{l}.bn.running_mean"));
                let var = self.running(&format!("conv{l}.bn.running_var"));
                self.tape
                    .batch_norm_eval(h, gamma, beta, &mean, &var, BN_EPS, format!("bn{l}"))?
            };
            h = self.tape.relu(h, format!("relu{l}"))?;
        }
        Ok(h)
    }

    /// Non-overlapping patch split, linear projection to d, class token,
    /// learned positional embeddings.
    fn patch_embed(&mut self, x: TensorId) -> Result<TensorId> {
        let p = self.params.config.patch;
        let patches = self.tape.extract_patches(x, p, "patchify")?;
        let w = self.leaf("embed.weight")?;
        let b = self.leaf("embed.bias")?;
        let projected = self.tape.matmul(patches, w, "embed.matmul")?;
        let projected = self.tape.add_bias(projected, b, "embed.bias")?;
        let cls = self.leaf("cls")?;
        let seq = self.tape.concat_token(cls, projected, "cls.concat")?;
        let pos = self.leaf("pos")?;
        self.tape.add_row(seq, pos, "pos.add")
    }

    /// Pre-norm block: single-head attention with residual, then MLP with
    /// residual. Attention is value-weighting by softmax(Q K^T / sqrt(d))
    /// row-normalized over keys.
    fn transformer_block(&mut self, x: TensorId, b: usize) -> Result<TensorId> {
        let d = self.params.config.embed_dim;
        let ln1_g = self.leaf(&format!("block{b}.ln1.gamma"))?;
        let ln1_b = self.leaf(&format!("block{b}.ln1.beta"))?;
        let normed = self
            .tape
            .layer_norm(x, ln1_g, ln1_b, LN_EPS, format!("block{b}.ln1"))?;
        let wq = self.leaf(&format!("block{b}.attn.wq"))?;
        let wk = self.leaf(&format!("block{b}.attn.wk"))?;
        let wv = self.leaf(&format!("block{b}.attn.wv"))?;
        let q = self.tape.matmul(normed, wq, format!("block{b}.attn.q"))?;
        let k = self.tape.matmul(normed, wk, format!("block{b}.attn.k"))?;
        let v = self.tape.matmul(normed, wv, format!("block{b}.attn.v"))?;
        let scores = self.tape.bat_matmul_nt(q, k, format!("block{b}.attn.scores"))?;
        let scaled = self
            .tape
            .scale(scores, 1.0 / (d as f64).sqrt(), format!("block{b}.attn.scale"))?;
        let attn = self
            .tape
            .softmax_rows(scaled, format!("block{b}.attn.softmax"))?;
        let mixed = self.tape.bat_matmul_nn(attn, v, format!("block{b}.attn.mix"))?;
        let ow = self.leaf(&format!("block{b}.attn.out.weight"))?;
        let ob = self.leaf(&format!("block{b}.attn.out.bias"))?;
        let proj = self.tape.matmul(mixed, ow, format!("block{b}.attn.out"))?;
        let proj = self.tape.add_bias(proj, ob, format!("block{b}.attn.out.bias"))?;
        let x = self.tape.add(x, proj, format!("block{b}.attn.residual"))?;

        let ln2_g = self.leaf(&format!("block{b}.ln2.gamma"))?;
        let ln2_b = self.leaf(&format!("block{b}.ln2.beta"))?;
        let normed = self
            .tape
            .layer_norm(x, ln2_g, ln2_b, LN_EPS, format!("block{b}.ln2"))?;
        let w1 = self.leaf(&format!("block{b}.mlp.fc1.weight"))?;
        let b1 = self.leaf(&format!("block{b}.mlp.fc1.bias"))?;
        let w2 = self.leaf(&format!("block{b}.mlp.fc2.weight"))?;
        let b2 = self.leaf(&format!("block{b}.mlp.fc2.bias"))?;
        let h = self.tape.matmul(normed, w1, format!("block{b}.mlp.fc1"))?;
        let h = self.tape.add_bias(h, b1, format!("block{b}.mlp.fc1.bias"))?;
        let h = self.tape.gelu(h, format!("block{b}.mlp.gelu"))?;
        let h = self.tape.matmul(h, w2, format!("block{b}.mlp.fc2"))?;
        let h = self.tape.add_bias(h, b2, format!("block{b}.mlp.fc2.bias"))?;
        self.tape.add(x, h, format!("block{b}.mlp.residual"))
    }
}

/// Builds the full forward graph for a normalized input batch
/// `[B, s, s, in_channels]` (flattened row-major channel-last).
///
/// `training` selects batch-statistics BN (recorded for running-stat
/// updates); inference uses the frozen running statistics.
pub fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    input: Vec<T>,
    batch: usize,
    training: bool,
) -> Result<ForwardGraph> {
    let cfg = &params.config;
    let expected = batch * cfg.window * cfg.window * cfg.in_channels;
    if input.len() != expected {
        return Err(Error::config(format!(
            "input length {} does not match batch {batch} of {}x{}x{}",
            input.len(),
            cfg.window,
            cfg.window,
            cfg.in_channels
        )));
    }
    let shape = [batch, cfg.window, cfg.window, cfg.in_channels];
    let x = tape.leaf(&shape, input, "input", false)?;

    let mut builder = Builder {
        tape,
        params,
        leaves: vec![None; params.tensors.len()],
        training,
    };
    let mut bn_nodes = Vec::new();
    let features = builder.early_cnn(x, &mut bn_nodes)?;
    let mut seq = builder.patch_embed(features)?;
    for b in 0..cfg.depth {
        seq = builder.transformer_block(seq, b)?;
    }
    let hw = builder.leaf("head.weight")?;
    let hb = builder.leaf("head.bias")?;
    let logits_all = builder.tape.matmul(seq, hw, "head")?;
    let logits_all = builder.tape.add_bias(logits_all, hb, "head.bias")?;
    let n = cfg.num_patches();
    let cls_logits = builder.tape.slice_rows(logits_all, 0, 1, "cls.logits")?;
    let patch_logits = builder.tape.slice_rows(logits_all, 1, n + 1, "patch.logits")?;
    let cls_probs = builder.tape.softmax_rows(cls_logits, "cls.softmax")?;

    let param_leaves = builder
        .leaves
        .iter()
        .enumerate()
        .filter_map(|(idx, id)| {
            id.and_then(|id| params.tensors[idx].trainable.then_some((idx, id)))
        })
        .collect();

    Ok(ForwardGraph { input: x, cls_logits, patch_logits, cls_probs, param_leaves, bn_nodes })
}

/// Folds the batch statistics recorded by training-mode BN nodes into the
/// running statistics (momentum update, unbiased variance).
pub fn update_running_stats<T: Scalar>(
    params: &mut ModelParams<T>,
    tape: &Tape<T>,
    graph: &ForwardGraph,
) {
    for &(layer, node) in &graph.bn_nodes {
        let Some((mean, var)) = tape.bn_batch_stats(node) else { continue };
        let rows: usize = tape.shape(node).iter().product::<usize>() / mean.len();
        let unbias = rows as f64 / (rows as f64 - 1.0).max(1.0);
        let mean = mean.to_vec();
        let var = var.to_vec();
        let l = layer + 1;
        let m_idx = params.index_of(&format!("conv{l}.bn.running_mean"));
        let v_idx = params.index_of(&format!("conv{l}.bn.running_var"));
        for (k, &mu) in mean.iter().enumerate() {
            let old = params.tensors[m_idx].data[k].as_f64();
            params.tensors[m_idx].data[k] =
                T::from_f64((1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * mu);
        }
        for (k, &vv) in var.iter().enumerate() {
            let old = params.tensors[v_idx].data[k].as_f64();
            params.tensors[v_idx].data[k] =
                T::from_f64((1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * vv * unbias);
        }
    }
}

/// Extracted forward values for a batch: class-token logits `[B, M]` and
/// per-patch logits `[B, N, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub cls_logits: Vec<f64>,
    pub patch_logits: Vec<f64>,
    pub batch: usize,
    pub num_classes: usize,
    pub num_patches: usize,
}

impl ForwardOutput {
    pub fn from_graph<T: Scalar>(tape: &Tape<T>, graph: &ForwardGraph) -> Self {
        let cls_shape = tape.shape(graph.cls_logits).to_vec();
        let patch_shape = tape.shape(graph.patch_logits).to_vec();
        Self {
            cls_logits: tape.value(graph.cls_logits).iter().map(|x| x.as_f64()).collect(),
            patch_logits: tape.value(graph.patch_logits).iter().map(|x| x.as_f64()).collect(),
            batch: cls_shape[0],
            num_classes: cls_shape[2],
            num_patches: patch_shape[1],
        }
    }

    pub fn cls_logits_of(&self, b: usize) -> &[f64] {
        &self.cls_logits[b * self.num_classes..(b + 1) * self.num_classes]
    }

    pub fn patch_logits_of(&self, b: usize, n: usize) -> &[f64] {
        let base = (b * self.num_patches + n) * self.num_classes;
        &self.patch_logits[base..base + self.num_classes]
    }

    /// Stable softmax of the class-token logits for sample `b`; sums to 1.
    pub fn cls_probs_of(&self, b: usize) -> Vec<f64> {
        softmax_f64(self.cls_logits_of(b))
    }

    /// Argmax with ties broken toward the lower class index.
    pub fn cls_argmax(&self, b: usize) -> usize {
        argmax_low(self.cls_logits_of(b))
    }

    pub fn patch_argmax(&self, b: usize, n: usize) -> usize {
        argmax_low(self.patch_logits_of(b, n))
    }
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// First index attaining the maximum.
pub fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
