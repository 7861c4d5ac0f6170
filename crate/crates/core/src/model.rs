//! Desk-scale matching network: a toy embedding encoder, stacked
//! interaction layers (tri-, bi- or context-added bi-attention), pooled
//! aggregation and a linear softmax classifier, trained with minibatch SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bi::{softmax_in_place, BiParams, BiPlan, BiQuery, BiVariant};
use crate::error::{invalid, shape, Error, Result};
use crate::init::{normal_matrix, seeded, uniform_matrix, Rng64};
use crate::tensor::{axpy, Matrix, Vector};
use crate::tri::{TriParams, TriPlan, TriQuery, TriVariant, ValueIntegration};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// Ids below this are reserved for the special tokens.
pub const FIRST_ORDINARY_TOKEN: usize = 3;
pub const N_CLASSES: usize = 2;
pub const STATE_FORMAT_VERSION: u32 = 1;

/// Which interaction path the network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "tri")]
    Tri,
    #[serde(rename = "bi")]
    Bi,
    #[serde(rename = "c-bi", alias = "c_bi")]
    CBi,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Bi, Mode::CBi, Mode::Tri];

    /// Name used in reports.
    pub fn name(self) -> &'static str {
        match self {
            Mode::Tri => "tri",
            Mode::Bi => "bi",
            Mode::CBi => "c_bi",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" => Ok(Mode::Tri),
            "bi" => Ok(Mode::Bi),
            "c-bi" | "c_bi" => Ok(Mode::CBi),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TanConfig {
    pub mode: Mode,
    /// Tri-attention score; bi and c-bi modes use its bi counterpart.
    pub variant: TriVariant,
    pub integration: ValueIntegration,
    pub layers: usize,
    /// Embedding width `D`.
    pub dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub residual: bool,
    /// `None`: fan-in uniform embedding table; `Some(s)`: `N(0, s^2)`.
    pub embed_std: Option<f64>,
    /// Largest global gradient norm per SGD step; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TanConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tri,
            variant: TriVariant::Tdp,
            integration: ValueIntegration::Multiplicative,
            layers: 1,
            dim: 8,
            vocab_size: 50,
            max_seq_len: 32,
            dropout: 0.1,
            seed: 1,
            learning_rate: 0.5,
            batch_size: 16,
            epochs: 10,
            residual: false,
            embed_std: None,
            grad_clip: None,
        }
    }
}

impl TanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(1..=8).contains(&self.layers) {
            return Err(invalid(format!("layers {} outside 1..=8", self.layers)));
        }
        if self.dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        if self.vocab_size <= FIRST_ORDINARY_TOKEN {
            return Err(invalid("vocabulary must extend past the special tokens"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be finite and nonnegative"));
        }
        if let Some(s) = self.embed_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("embedding std must be positive"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("gradient clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn bi_variant(&self) -> BiVariant {
        self.variant.bi_counterpart()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub seq_a: Vec<usize>,
    pub seq_b: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// `D x vocab`; column `t` embeds token `t`.
    pub table: Matrix,
    pub cls: usize,
    pub sep: usize,
    pub pad: usize,
}

impl ToyEncoder {
    pub fn new(table: Matrix) -> Result<Self> {
        if table.cols() <= FIRST_ORDINARY_TOKEN || table.rows() == 0 {
            return Err(invalid("embedding table too small"));
        }
        Ok(Self {
            vocab_size: table.cols(),
            embed_dim: table.rows(),
            table,
            cls: CLS,
            sep: SEP,
            pad: PAD,
        })
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab_size) {
            Some(t) => Err(invalid(format!("token {t} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }

    /// Embedding columns for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check(ids)?;
        Ok(ids.iter().map(|&t| self.table.col(t).into_vec()).collect())
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Matrix> {
        let cols = self.embed(ids)?;
        if cols.is_empty() {
            return Ok(Matrix::zeros(self.embed_dim, 0));
        }
        Matrix::from_cols(&cols)
    }
}

/// `[CLS] a [SEP] b [SEP]`.
pub fn context_tokens(seq_a: &[usize], seq_b: &[usize], encoder: &ToyEncoder) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq_a.len() + seq_b.len() + 3);
    out.push(encoder.cls);
    out.extend_from_slice(seq_a);
    out.push(encoder.sep);
    out.extend_from_slice(seq_b);
    out.push(encoder.sep);
    out
}

/// Context matrix `C` (`D x J`) with `J = |a| + |b| + 3`.
pub fn build_context(seq_a: &[usize], seq_b: &[usize], encoder: &ToyEncoder) -> Result<Matrix> {
    if seq_a.is_empty() || seq_b.is_empty() {
        return Err(invalid("context needs two nonempty sequences"));
    }
    encoder.encode(&context_tokens(seq_a, seq_b, encoder))
}

/// Keeps the first `max_seq_len` tokens.
pub fn filter(seq: &[usize], max_seq_len: usize) -> Vec<usize> {
    seq[..seq.len().min(max_seq_len)].to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum LayerParams {
    Tri(TriParams),
    Bi(BiParams),
}

impl LayerParams {
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            LayerParams::Tri(p) => p.blocks(),
            LayerParams::Bi(p) => p.blocks(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            LayerParams::Tri(p) => p.blocks_mut(),
            LayerParams::Bi(p) => p.blocks_mut(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            LayerParams::Tri(p) => LayerParams::Tri(p.zeros_like()),
            LayerParams::Bi(p) => LayerParams::Bi(p.zeros_like()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanState {
    pub encoder: ToyEncoder,
    pub layers: Vec<LayerParams>,
    /// `2 x 4D`.
    pub classifier: Matrix,
    pub bias: Vector,
}

impl TanState {
    /// Encoder and classifier are drawn first, so one seed gives the same
    /// embeddings and classifier in every mode.
    pub fn init(config: &TanConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = seeded(config.seed);
        let table = match config.embed_std {
            None => uniform_matrix(&mut rng, d, config.vocab_size, d),
            Some(s) => normal_matrix(&mut rng, d, config.vocab_size, s),
        };
        let classifier = uniform_matrix(&mut rng, N_CLASSES, 4 * d, 4 * d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(match config.mode {
                Mode::Tri => LayerParams::Tri(TriParams::init(config.variant, config.integration, d, &mut rng)?),
                Mode::Bi | Mode::CBi => LayerParams::Bi(BiParams::init(config.bi_variant(), d, &mut rng)),
            });
        }
        Ok(Self {
            encoder: ToyEncoder::new(table)?,
            layers,
            classifier,
            bias: Vector::zeros(N_CLASSES),
        })
    }

    pub fn validate(&self, config: &TanConfig) -> Result<()> {
        let d = config.dim;
        if self.encoder.embed_dim != d || self.classifier.shape() != (N_CLASSES, 4 * d) || self.bias.len() != N_CLASSES {
            return Err(shape("state dimensions disagree with config"));
        }
        if self.layers.len() != config.layers {
            return Err(shape(format!(
                "state has {} layers, config {}",
                self.layers.len(),
                config.layers
            )));
        }
        for layer in &self.layers {
            match (layer, config.mode) {
                (LayerParams::Tri(p), Mode::Tri) => p.validate(config.variant, config.integration, d)?,
                (LayerParams::Bi(p), Mode::Bi | Mode::CBi) => p.validate(config.bi_variant(), d)?,
                _ => return Err(invalid("layer kind does not match mode")),
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            encoder: ToyEncoder {
                table: Matrix::zeros(self.encoder.table.rows(), self.encoder.table.cols()),
                ..self.encoder.clone()
            },
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            classifier: Matrix::zeros(self.classifier.rows(), self.classifier.cols()),
            bias: Vector::zeros(self.bias.len()),
        }
    }

    /// Every learnable block; layer blocks are prefixed by their index.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("table".to_string(), self.encoder.table.as_slice())];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.blocks().into_iter().map(|(n, b)| (format!("layer{l}.{n}"), b)));
        }
        out.push(("classifier".into(), self.classifier.as_slice()));
        out.push(("bias".into(), self.bias.as_slice()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("table".to_string(), self.encoder.table.as_mut_slice())];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.blocks_mut().into_iter().map(|(n, b)| (format!("layer{l}.{n}"), b)));
        }
        out.push(("classifier".into(), self.classifier.as_mut_slice()));
        out.push(("bias".into(), self.bias.as_mut_slice()));
        out
    }

    fn clip_norm(&mut self, max_norm: f64) {
        let norm = self
            .blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for (_, b) in self.blocks_mut() {
                b.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }

    fn sgd_step(&mut self, grad: &Self, lr: f64) {
        for ((_, p), (_, g)) in self.blocks_mut().into_iter().zip(grad.blocks()) {
            axpy(-lr, g, p);
        }
    }
}

/// On-disk model: fields serialise in the order `format_version`, `config`,
/// `state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    pub config: TanConfig,
    pub state: TanState,
}

impl SavedModel {
    pub fn new(config: TanConfig, state: TanState) -> Self {
        Self {
            format_version: STATE_FORMAT_VERSION,
            config,
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != STATE_FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        m.config.validate()?;
        m.state.validate(&m.config)?;
        Ok(m)
    }
}

/// Interaction layer bound to one side's keys/values and the context.
enum Plan<'a> {
    Tri(TriPlan<'a>),
    Bi(BiPlan<'a>),
}

enum QueryCache {
    Tri(TriQuery),
    Bi(BiQuery),
}

enum Accum {
    Tri(crate::tri::TriAccum),
    Bi(crate::bi::BiAccum),
}

impl<'a> Plan<'a> {
    fn new(
        params: &'a LayerParams,
        config: &TanConfig,
        keys: &'a [Vec<f64>],
        ctx: &'a [Vec<f64>],
    ) -> Result<Self> {
        let d = config.dim;
        Ok(match params {
            LayerParams::Tri(p) => Plan::Tri(TriPlan::new(config.variant, config.integration, keys, keys, ctx, p, d)?),
            LayerParams::Bi(p) => Plan::Bi(BiPlan::new(config.bi_variant(), keys, keys, p, d)?),
        })
    }

    fn forward(&self, q: &[f64]) -> QueryCache {
        match self {
            Plan::Tri(p) => QueryCache::Tri(p.forward(q)),
            Plan::Bi(p) => QueryCache::Bi(p.forward(q)),
        }
    }

    fn accum(&self) -> Accum {
        match self {
            Plan::Tri(p) => Accum::Tri(p.accum()),
            Plan::Bi(p) => Accum::Bi(p.accum()),
        }
    }

    fn backward(&self, q: &[f64], cache: &QueryCache, upstream: &[f64], acc: &mut Accum) -> Vec<f64> {
        match (self, cache, acc) {
            (Plan::Tri(p), QueryCache::Tri(c), Accum::Tri(a)) => p.backward(q, c, upstream, a),
            (Plan::Bi(p), QueryCache::Bi(c), Accum::Bi(a)) => p.backward(q, c, upstream, a),
            _ => unreachable!("plan, cache and accumulator kinds always agree"),
        }
    }

    /// Completes `acc` and adds its key/value, context and parameter adjoints
    /// into the given buffers.
    fn drain(&self, acc: &mut Accum, d_keys: &mut [Vec<f64>], d_ctx: &mut [Vec<f64>], d_params: &mut LayerParams) {
        let (dk, dv, grads): (&[Vec<f64>], &[Vec<f64>], Vec<(&str, &[f64])>) = match (self, &mut *acc) {
            (Plan::Tri(p), Accum::Tri(a)) => {
                p.finish(a);
                for (dst, src) in d_ctx.iter_mut().zip(&a.d_ctx) {
                    axpy(1.0, src, dst);
                }
                (&a.d_keys, &a.d_values, a.d_params.blocks())
            }
            (Plan::Bi(p), Accum::Bi(a)) => {
                p.finish(a);
                (&a.d_keys, &a.d_values, a.d_params.blocks())
            }
            _ => unreachable!("plan and accumulator kinds always agree"),
        };
        for ((dst, k), v) in d_keys.iter_mut().zip(dk).zip(dv) {
            axpy(1.0, k, dst);
            axpy(1.0, v, dst);
        }
        for ((_, dst), (_, src)) in d_params.blocks_mut().into_iter().zip(grads) {
            axpy(1.0, src, dst);
        }
    }
}

fn mean_col(cols: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for c in cols {
        axpy(1.0, c, &mut out);
    }
    let n = cols.len().max(1) as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Activations of one forward pass, kept for the backward pass.
struct Trace {
    a_ids: Vec<usize>,
    b_ids: Vec<usize>,
    c_ids: Option<Vec<usize>>,
    ctx: Vec<Vec<f64>>,
    /// Sequence states entering each layer, plus the final output.
    a: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<Vec<f64>>>,
    pooled_a: Vec<f64>,
    pooled_b: Vec<f64>,
    features: Vec<f64>,
    mask: Option<Vec<f64>>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

fn run_forward(
    state: &TanState,
    config: &TanConfig,
    ex: &Example,
    ctx_override: Option<&Matrix>,
    mask: Option<Vec<f64>>,
) -> Result<Trace> {
    let d = config.dim;
    let a_ids = filter(&ex.seq_a, config.max_seq_len);
    let b_ids = filter(&ex.seq_b, config.max_seq_len);
    if a_ids.is_empty() || b_ids.is_empty() {
        return Err(invalid("both sequences must be nonempty after filtering"));
    }
    let enc = &state.encoder;
    let (ctx, c_ids) = match ctx_override {
        Some(c) => {
            if c.rows() != d || c.cols() == 0 {
                return Err(shape(format!("context override must be {d}xJ with J >= 1")));
            }
            (c.columns(), None)
        }
        None => {
            let ids = context_tokens(&a_ids, &b_ids, enc);
            (enc.embed(&ids)?, Some(ids))
        }
    };
    let pooled_c = mean_col(&ctx, d);
    let mut a0 = enc.embed(&a_ids)?;
    let mut b0 = enc.embed(&b_ids)?;
    if config.mode == Mode::CBi {
        for x in a0.iter_mut().chain(b0.iter_mut()) {
            axpy(1.0, &pooled_c, x);
        }
    }
    let mut a = vec![a0];
    let mut b = vec![b0];
    for params in &state.layers {
        let (al, bl) = (a.last().expect("nonempty"), b.last().expect("nonempty"));
        let plan_a = Plan::new(params, config, bl, &ctx)?;
        let plan_b = Plan::new(params, config, al, &ctx)?;
        let step = |plan: &Plan, qs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            qs.iter()
                .map(|q| {
                    let mut out = match plan.forward(q) {
                        QueryCache::Tri(c) => c.out,
                        QueryCache::Bi(c) => c.out,
                    };
                    if config.residual {
                        axpy(1.0, q, &mut out);
                    }
                    out
                })
                .collect()
        };
        let next_a = step(&plan_a, al);
        let next_b = step(&plan_b, bl);
        a.push(next_a);
        b.push(next_b);
    }
    let pooled_a = mean_col(a.last().expect("nonempty"), d);
    let pooled_b = mean_col(b.last().expect("nonempty"), d);
    let mut features = Vec::with_capacity(4 * d);
    features.extend_from_slice(&pooled_a);
    features.extend_from_slice(&pooled_b);
    features.extend_from_slice(&pooled_c);
    features.extend(pooled_a.iter().zip(&pooled_b).map(|(x, y)| (x - y).abs()));
    let mut h = features.clone();
    if let Some(m) = &mask {
        h.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
    let mut logits = state.classifier.matvec_unchecked(&h);
    axpy(1.0, state.bias.as_slice(), &mut logits);
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let mut probs = logits;
    softmax_in_place(&mut probs);
    if probs.iter().chain(&log_probs).any(|p| !p.is_finite()) {
        return Err(invalid("non-finite class probabilities"));
    }
    Ok(Trace {
        a_ids,
        b_ids,
        c_ids,
        ctx,
        a,
        b,
        pooled_a,
        pooled_b,
        features,
        mask,
        probs,
        log_probs,
    })
}

fn dropout_mask(rate: f64, len: usize, rng: &mut Rng64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn check_example(ex: &Example) -> Result<()> {
    if ex.label >= N_CLASSES {
        return Err(invalid(format!("label {} is not a class index", ex.label)));
    }
    Ok(())
}

/// Class probabilities for one example. `rng` drives dropout and is only
/// consulted when `train_mode` is set and the rate is positive.
pub fn tan_forward(
    state: &TanState,
    ex: &Example,
    config: &TanConfig,
    train_mode: bool,
    rng: Option<&mut Rng64>,
) -> Result<Vector> {
    forward_with_context(state, ex, config, train_mode, rng, None)
}

/// [`tan_forward`] in context-added bi-attention mode.
pub fn c_bi_forward(
    state: &TanState,
    ex: &Example,
    config: &TanConfig,
    train_mode: bool,
    rng: Option<&mut Rng64>,
) -> Result<Vector> {
    let cfg = TanConfig {
        mode: Mode::CBi,
        ..config.clone()
    };
    forward_with_context(state, ex, &cfg, train_mode, rng, None)
}

/// Forward pass with an explicit context matrix in place of the encoded
/// `[CLS] a [SEP] b [SEP]`. The override also feeds the pooled context
/// feature.
pub fn forward_with_context(
    state: &TanState,
    ex: &Example,
    config: &TanConfig,
    train_mode: bool,
    rng: Option<&mut Rng64>,
    ctx: Option<&Matrix>,
) -> Result<Vector> {
    config.validate()?;
    state.validate(config)?;
    check_example(ex)?;
    let mask = match (train_mode && config.dropout > 0.0, rng) {
        (true, Some(rng)) => Some(dropout_mask(config.dropout, 4 * config.dim, rng)),
        (true, None) => return Err(invalid("training-mode dropout needs a random source")),
        (false, _) => None,
    };
    Ok(Vector::from(run_forward(state, config, ex, ctx, mask)?.probs))
}

/// Cross-entropy of one example; gradients are added into `grad` scaled by
/// `weight`.
fn backward(
    state: &TanState,
    config: &TanConfig,
    tr: &Trace,
    label: usize,
    weight: f64,
    grad: &mut TanState,
) -> Result<()> {
    let d = config.dim;
    // logits
    let mut dlogits = tr.probs.clone();
    dlogits[label] -= 1.0;
    dlogits.iter_mut().for_each(|x| *x *= weight);
    let mut h = tr.features.clone();
    if let Some(m) = &tr.mask {
        h.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
    grad.classifier.add_outer(1.0, &dlogits, &h);
    axpy(1.0, &dlogits, grad.bias.as_mut_slice());
    let mut dh = state.classifier.matvec_t_unchecked(&dlogits);
    if let Some(m) = &tr.mask {
        dh.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }

    // aggregation
    let mut dpa = dh[..d].to_vec();
    let mut dpb = dh[d..2 * d].to_vec();
    let mut dpc = dh[2 * d..3 * d].to_vec();
    for r in 0..d {
        let diff = tr.pooled_a[r] - tr.pooled_b[r];
        let s = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        dpa[r] += s * dh[3 * d + r];
        dpb[r] -= s * dh[3 * d + r];
    }
    let spread = |g: &[f64], n: usize| -> Vec<Vec<f64>> {
        let scaled: Vec<f64> = g.iter().map(|x| x / n as f64).collect();
        vec![scaled; n]
    };
    let n_layers = state.layers.len();
    let mut da = spread(&dpa, tr.a[n_layers].len());
    let mut db = spread(&dpb, tr.b[n_layers].len());
    let mut dctx = vec![vec![0.0; d]; tr.ctx.len()];

    // interaction layers, last to first
    for l in (0..n_layers).rev() {
        let params = &state.layers[l];
        let (al, bl) = (&tr.a[l], &tr.b[l]);
        let plan_a = Plan::new(params, config, bl, &tr.ctx)?;
        let plan_b = Plan::new(params, config, al, &tr.ctx)?;
        let mut next_da = if config.residual { da.clone() } else { vec![vec![0.0; d]; al.len()] };
        let mut next_db = if config.residual { db.clone() } else { vec![vec![0.0; d]; bl.len()] };
        let mut acc_a = plan_a.accum();
        for ((q, up), dq_dst) in al.iter().zip(&da).zip(next_da.iter_mut()) {
            let cache = plan_a.forward(q);
            axpy(1.0, &plan_a.backward(q, &cache, up, &mut acc_a), dq_dst);
        }
        let mut acc_b = plan_b.accum();
        for ((q, up), dq_dst) in bl.iter().zip(&db).zip(next_db.iter_mut()) {
            let cache = plan_b.forward(q);
            axpy(1.0, &plan_b.backward(q, &cache, up, &mut acc_b), dq_dst);
        }
        let dparams = &mut grad.layers[l];
        plan_a.drain(&mut acc_a, &mut next_db, &mut dctx, dparams);
        plan_b.drain(&mut acc_b, &mut next_da, &mut dctx, dparams);
        da = next_da;
        db = next_db;
    }

    // pooled context: direct feature plus the c-bi shift
    if config.mode == Mode::CBi {
        for g in da.iter().chain(&db) {
            axpy(1.0, g, &mut dpc);
        }
    }
    let j = tr.ctx.len() as f64;
    for dc in dctx.iter_mut() {
        axpy(1.0 / j, &dpc, dc);
    }

    // embedding table
    let table = &mut grad.encoder.table;
    let mut add_col = |tok: usize, g: &[f64]| {
        for (r, x) in g.iter().enumerate() {
            let v = table.get(r, tok);
            table.set(r, tok, v + x);
        }
    };
    for (&t, g) in tr.a_ids.iter().zip(&da) {
        add_col(t, g);
    }
    for (&t, g) in tr.b_ids.iter().zip(&db) {
        add_col(t, g);
    }
    if let Some(ids) = &tr.c_ids {
        for (&t, g) in ids.iter().zip(&dctx) {
            add_col(t, g);
        }
    }
    Ok(())
}

/// Loss and the gradient of the mean cross-entropy over `batch`, without
/// dropout. Exposed for gradient checks of the whole network.
pub fn loss_and_gradient(state: &TanState, config: &TanConfig, batch: &[Example]) -> Result<(f64, TanState)> {
    config.validate()?;
    state.validate(config)?;
    let mut grad = state.zeros_like();
    let w = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    for ex in batch {
        check_example(ex)?;
        let tr = run_forward(state, config, ex, None, None)?;
        loss += -tr.log_probs[ex.label] * w;
        backward(state, config, &tr, ex.label, w, &mut grad)?;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub state: TanState,
    pub epochs: Vec<EpochMetrics>,
}

/// Minibatch SGD on the mean cross-entropy. Shuffling and dropout draw from
/// a stream seeded by `config.seed`, so runs are reproducible bit for bit.
pub fn train(config: &TanConfig, dataset: &[Example]) -> Result<TrainOutcome> {
    train_from(TanState::init(config)?, config, dataset)
}

pub fn train_from(mut state: TanState, config: &TanConfig, dataset: &[Example]) -> Result<TrainOutcome> {
    config.validate()?;
    state.validate(config)?;
    if dataset.is_empty() {
        return Err(invalid("empty training set"));
    }
    for ex in dataset {
        check_example(ex)?;
    }
    let mut rng = seeded(config.seed.wrapping_add(0x5eed_0f_da7a));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grad = state.zeros_like();
            let w = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &dataset[i];
                let mask = (config.dropout > 0.0).then(|| dropout_mask(config.dropout, 4 * config.dim, &mut rng));
                let tr = run_forward(&state, config, ex, None, mask)?;
                batch_loss += -tr.log_probs[ex.label];
                if argmax(&tr.probs) == ex.label {
                    correct += 1;
                }
                backward(&state, config, &tr, ex.label, w, &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss * w,
                });
            }
            total += batch_loss;
            if let Some(max_norm) = config.grad_clip {
                grad.clip_norm(max_norm);
            }
            state.sgd_step(&grad, config.learning_rate);
        }
        history.push(EpochMetrics {
            epoch,
            loss: total / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(TrainOutcome { state, epochs: history })
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode probabilities for every example, in parallel.
pub fn predict(state: &TanState, config: &TanConfig, data: &[Example]) -> Result<Vec<Vector>> {
    config.validate()?;
    state.validate(config)?;
    data.par_iter()
        .map(|ex| {
            check_example(ex)?;
            Ok(Vector::from(run_forward(state, config, ex, None, None)?.probs))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    /// F1 of class 1.
    pub f1: f64,
}

pub fn score_predictions(predicted: &[usize], gold: &[usize]) -> Scores {
    let n = predicted.len().max(1) as f64;
    let (mut tp, mut fp, mut fneg, mut correct) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in predicted.iter().zip(gold) {
        if p == g {
            correct += 1.0;
        }
        match (p, g) {
            (1, 1) => tp += 1.0,
            (1, _) => fp += 1.0,
            (_, 1) => fneg += 1.0,
            _ => {}
        }
    }
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    Scores {
        accuracy: correct / n,
        f1,
    }
}

pub fn evaluate(state: &TanState, config: &TanConfig, data: &[Example]) -> Result<Scores> {
    let probs = predict(state, config, data)?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p.as_slice())).collect();
    let gold: Vec<usize> = data.iter().map(|e| e.label).collect();
    Ok(score_predictions(&predicted, &gold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode, variant: TriVariant) -> TanConfig {
        TanConfig {
            mode,
            variant,
            integration: variant.default_integration(),
            dim: 4,
            vocab_size: 12,
            max_seq_len: 10,
            dropout: 0.0,
            embed_std: Some(0.7),
            ..TanConfig::default()
        }
    }

    fn ex() -> Example {
        Example {
            seq_a: vec![5, 6, 7],
            seq_b: vec![8, 3],
            label: 1,
        }
    }

    #[test]
    fn context_layout() {
        let state = TanState::init(&cfg(Mode::Tri, TriVariant::Tdp)).unwrap();
        let c = build_context(&[5], &[7], &state.encoder).unwrap();
        assert_eq!(c.cols(), 5);
        for (j, t) in [CLS, 5, SEP, 7, SEP].iter().enumerate() {
            assert_eq!(c.col(j), state.encoder.table.col(*t));
        }
        assert!(build_context(&[], &[7], &state.encoder).is_err());
    }

    #[test]
    fn filter_keeps_head() {
        assert_eq!(filter(&[1, 2, 3], 10), vec![1, 2, 3]);
        let long: Vec<usize> = (0..12).collect();
        assert_eq!(filter(&long, 10), (0..10).collect::<Vec<_>>());
        assert!(filter(&long, 0).is_empty());
    }

    #[test]
    fn probabilities_on_simplex() {
        for mode in Mode::ALL {
            for variant in TriVariant::ALL {
                let c = cfg(mode, variant);
                let state = TanState::init(&c).unwrap();
                let p = tan_forward(&state, &ex(), &c, false, None).unwrap();
                assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.as_slice().iter().all(|x| *x >= 0.0));
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_state() {
        let c = TanConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..cfg(Mode::Tri, TriVariant::TAdd)
        };
        let data = vec![ex(); 3];
        let init = TanState::init(&c).unwrap();
        let (loss0, _) = loss_and_gradient(&init, &c, &data).unwrap();
        let out = train(&c, &data).unwrap();
        assert_eq!(out.state, init);
        assert!((out.epochs[0].loss - loss0).abs() < 1e-12);
    }

    #[test]
    fn clipped_step_is_bounded() {
        let c = TanConfig {
            learning_rate: 1.0,
            epochs: 1,
            batch_size: 4,
            grad_clip: Some(1e-3),
            ..cfg(Mode::Tri, TriVariant::TAdd)
        };
        let data = vec![ex(); 4];
        let init = TanState::init(&c).unwrap();
        let (_, g) = loss_and_gradient(&init, &c, &data).unwrap();
        let g_norm: f64 = g.blocks().iter().flat_map(|(_, b)| b.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!(g_norm > 1e-3);
        let out = train(&c, &data).unwrap();
        let step: f64 = out
            .state
            .blocks()
            .iter()
            .zip(init.blocks())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt();
        assert!((step - 1e-3).abs() < 1e-12, "{step}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(Mode::Tri, TriVariant::Tdp);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c.dropout = 0.1;
        c.layers = 9;
        assert!(c.validate().is_err());
        c.layers = 1;
        c.grad_clip = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("c-bi".parse::<Mode>().unwrap(), Mode::CBi);
    }
}
