//! Trainable predictors over prompt sequences.
//!
//! Parameters of either architecture live in one flat buffer with a table of
//! named tensor ranges, so gradients, optimiser state and checkpoints share a
//! single layout.

mod checkpoint;
pub mod linalg;
mod mlp;
mod transformer;

use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{describe, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use linalg::Scalar;

use crate::error::{Error, Result};
use crate::rng::{par_map, stream_rng};
use crate::sampler::PromptSequence;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Sequences per forward chunk during evaluation. Fixed so predictions do not
/// depend on the worker count.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { embed_dim: 256, n_layers: 12, n_heads: 8, n_points: 40, dropout: 0.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.n_points == 0 {
            return Err(Error::config("embed_dim, n_heads and n_points must be positive"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("dropout is not supported; set it to 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn n_tokens(&self) -> usize {
        2 * self.n_points - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub n_points: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self::for_points(40)
    }
}

impl MlpConfig {
    pub fn for_points(n_points: usize) -> Self {
        Self {
            n_points,
            input_dim: 2 * n_points.saturating_sub(1) + 1,
            hidden: vec![256, 256, 256],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::config("n_points must be positive"));
        }
        if self.input_dim != 2 * (self.n_points - 1) + 1 {
            return Err(Error::config(format!(
                "input_dim {} inconsistent with n_points {} (want {})",
                self.input_dim,
                self.n_points,
                2 * (self.n_points - 1) + 1
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Mlp(c) => c.validate(),
        }
    }

    pub fn n_points(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.n_points,
            ModelConfig::Mlp(c) => c.n_points,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Mlp(_) => "mlp",
        }
    }

    fn layout(&self) -> Vec<TensorSpec> {
        let mut b = LayoutBuilder::default();
        match self {
            ModelConfig::Transformer(c) => {
                transformer::Index::build(c, &mut b);
            }
            ModelConfig::Mlp(c) => {
                mlp::Index::build(c, &mut b);
            }
        }
        b.specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    pub(crate) fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset: self.offset };
        let range = spec.range();
        self.offset = range.end;
        self.specs.push(spec);
        range
    }
}

/// Activation buffers kept between training steps.
pub struct Workspace<T> {
    tf: transformer::Workspace<T>,
}

impl<T: Scalar> Default for Workspace<T> {
    fn default() -> Self {
        Self { tf: transformer::Workspace::default() }
    }
}

/// Full parameter set (or a gradient congruent to one).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: Arc<Vec<TensorSpec>>,
    data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let total = layout.last().map_or(0, |s| s.range().end);
        Ok(Self { config, layout: Arc::new(layout), data: vec![T::zero(); total] })
    }

    /// Weights ~ N(0, 0.02²), biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layout = Arc::clone(&p.layout);
        for (i, spec) in layout.iter().enumerate() {
            let values = &mut p.data[spec.range()];
            if spec.name.ends_with(".gain") {
                values.fill(T::one());
            } else if spec.name.ends_with(".bias") {
                values.fill(T::zero());
            } else {
                let mut rng = stream_rng(seed, i as u64);
                for v in values {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[range])
    }

    /// Name of the tensor holding flat coordinate `index`.
    pub fn tensor_of(&self, index: usize) -> Option<&TensorSpec> {
        self.layout.iter().find(|s| s.range().contains(&index))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Predictions at every x position of `xs`, given labels `ys` (length
    /// `n - 1`, or `n` with the last ignored).
    pub fn forward(&self, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
        let n = xs.len();
        check_lengths(n, ys.len(), self.config.n_points())?;
        let mut padded = ys[..n - 1].to_vec();
        padded.push(0.0);
        let preds = self.forward_flat(1, n, xs, &padded)?;
        Ok(preds)
    }

    /// Single MLP prediction from a flat `[x1, y1, ..., x_{n-1}, y_{n-1}]`
    /// context and a query input.
    pub fn mlp_forward(&self, pairs: &[f64], query_x: f64) -> Result<f64> {
        let ModelConfig::Mlp(cfg) = &self.config else {
            return Err(Error::config("mlp_forward needs an MLP model"));
        };
        if pairs.len() + 1 != cfg.input_dim {
            return Err(Error::shape(format!(
                "expected {} context values, got {}",
                cfg.input_dim - 1,
                pairs.len()
            )));
        }
        let mut input: Vec<T> = pairs.iter().map(|&v| T::of(v)).collect();
        input.push(T::of(query_x));
        let (out, _) = mlp::forward(&self.data, &mlp::Index::of(cfg), cfg, &input, 1, false);
        Ok(out[0].f64())
    }

    /// Predictions at every position of every sequence. Sequences may differ
    /// in length; each must fit the model.
    pub fn predict(&self, batch: &[PromptSequence], workers: usize) -> Result<Vec<Vec<f64>>> {
        let n_max = self.config.n_points();
        if let Some(s) = batch.iter().find(|s| s.is_empty() || s.len() > n_max) {
            return Err(Error::shape(format!(
                "sequence of length {} does not fit a model with n_points {n_max}",
                s.len()
            )));
        }
        // Group equal lengths so each chunk is one rectangular forward pass.
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| batch[i].len());
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        for i in order {
            match chunks.last_mut() {
                Some(c) if c.len() < EVAL_CHUNK && batch[c[0]].len() == batch[i].len() => c.push(i),
                _ => chunks.push(vec![i]),
            }
        }
        let results = par_map(chunks.len(), workers, |c| {
            let idx = &chunks[c];
            let n = batch[idx[0]].len();
            let mut xs = Vec::with_capacity(idx.len() * n);
            let mut ys = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                xs.extend(batch[i].points.iter().map(|p| p.x));
                ys.extend(batch[i].points.iter().map(|p| p.y));
            }
            self.forward_flat(idx.len(), n, &xs, &ys)
        });
        let mut out = vec![Vec::new(); batch.len()];
        for (chunk, preds) in chunks.iter().zip(results) {
            let preds = preds?;
            let n = batch[chunk[0]].len();
            for (j, &i) in chunk.iter().enumerate() {
                out[i] = preds[j * n..(j + 1) * n].to_vec();
            }
        }
        Ok(out)
    }

    /// Mean squared error over all positions (transformer) or the final
    /// position (MLP).
    pub fn loss(&self, batch: &[PromptSequence]) -> Result<f64> {
        Ok(self.loss_and_grad_impl(batch, false, &mut Workspace::default())?.0)
    }

    pub fn loss_and_grad(&self, batch: &[PromptSequence]) -> Result<(f64, ModelParams<T>)> {
        self.loss_and_grad_in(batch, &mut Workspace::default())
    }

    /// As [`Self::loss_and_grad`], reusing the activation buffers in `ws`.
    pub fn loss_and_grad_in(
        &self,
        batch: &[PromptSequence],
        ws: &mut Workspace<T>,
    ) -> Result<(f64, ModelParams<T>)> {
        let (loss, grad) = self.loss_and_grad_impl(batch, true, ws)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss_and_grad_impl(
        &self,
        batch: &[PromptSequence],
        want_grad: bool,
        ws: &mut Workspace<T>,
    ) -> Result<(f64, Option<ModelParams<T>>)> {
        let n = batch.first().map(|s| s.len()).ok_or_else(|| Error::shape("empty batch"))?;
        if batch.iter().any(|s| s.len() != n) {
            return Err(Error::shape("sequences in a batch must have equal length"));
        }
        if n == 0 || n > self.config.n_points() {
            return Err(Error::shape(format!(
                "sequence length {n} does not fit n_points {}",
                self.config.n_points()
            )));
        }
        let b = batch.len();
        let xs: Vec<T> = batch.iter().flat_map(|s| s.points.iter().map(|p| T::of(p.x))).collect();
        let ys: Vec<T> = batch.iter().flat_map(|s| s.points.iter().map(|p| T::of(p.y))).collect();
        match &self.config {
            ModelConfig::Transformer(cfg) => {
                let ix = transformer::Index::of(cfg);
                let preds = transformer::forward(&self.data, &ix, cfg, b, n, &xs, &ys, want_grad, &mut ws.tf);
                let scale = T::of(2.0 / (b * n) as f64);
                let mut loss = 0.0;
                let mut dpred = vec![T::zero(); b * n];
                for ((d, p), y) in dpred.iter_mut().zip(&preds).zip(&ys) {
                    let e = *p - *y;
                    loss += e.f64() * e.f64();
                    *d = scale * e;
                }
                loss /= (b * n) as f64;
                let grad = want_grad.then(|| {
                    let mut g = self.zeros_like();
                    transformer::backward(&self.data, &ix, cfg, &mut ws.tf, &dpred, &mut g.data);
                    g
                });
                Ok((loss, grad))
            }
            ModelConfig::Mlp(cfg) => {
                let ix = mlp::Index::of(cfg);
                let mut input = Vec::with_capacity(b * cfg.input_dim);
                let mut targets = Vec::with_capacity(b);
                for s in 0..b {
                    let row = &xs[s * n..(s + 1) * n];
                    let lab = &ys[s * n..(s + 1) * n];
                    mlp::encode(cfg, row, lab, n - 1, &mut input);
                    targets.push(lab[n - 1]);
                }
                let (preds, cache) = mlp::forward(&self.data, &ix, cfg, &input, b, want_grad);
                let scale = T::of(2.0 / b as f64);
                let mut loss = 0.0;
                let mut dpred = vec![T::zero(); b];
                for ((d, p), y) in dpred.iter_mut().zip(&preds).zip(&targets) {
                    let e = *p - *y;
                    loss += e.f64() * e.f64();
                    *d = scale * e;
                }
                loss /= b as f64;
                let grad = cache.map(|c| {
                    let mut g = self.zeros_like();
                    mlp::backward(&self.data, &ix, cfg, &c, &dpred, &mut g.data);
                    g
                });
                Ok((loss, grad))
            }
        }
    }

    /// `b` sequences of length `n`, flattened row-major.
    fn forward_flat(&self, b: usize, n: usize, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
        let xs: Vec<T> = xs.iter().map(|&v| T::of(v)).collect();
        let ys: Vec<T> = ys.iter().map(|&v| T::of(v)).collect();
        let preds = match &self.config {
            ModelConfig::Transformer(cfg) => {
                let ix = transformer::Index::of(cfg);
                transformer::forward(&self.data, &ix, cfg, b, n, &xs, &ys, false, &mut Workspace::default().tf)
            }
            ModelConfig::Mlp(cfg) => {
                // One zero-padded input per position.
                let mut input = Vec::with_capacity(b * n * cfg.input_dim);
                for s in 0..b {
                    for i in 0..n {
                        mlp::encode(cfg, &xs[s * n..(s + 1) * n], &ys[s * n..(s + 1) * n], i, &mut input);
                    }
                }
                mlp::forward(&self.data, &mlp::Index::of(cfg), cfg, &input, b * n, false).0
            }
        };
        Ok(preds.into_iter().map(|v| v.f64()).collect())
    }
}

fn check_lengths(n: usize, n_ys: usize, n_points: usize) -> Result<()> {
    if n == 0 || n > n_points {
        return Err(Error::shape(format!("need 1..={n_points} inputs, got {n}")));
    }
    if n_ys != n - 1 && n_ys != n {
        return Err(Error::shape(format!("{n} inputs need {} labels, got {n_ys}", n - 1)));
    }
    Ok(())
}

/// Parameter count of a configuration without allocating it.
pub fn parameter_count(config: &ModelConfig) -> usize {
    config.layout().last().map_or(0, |s| s.range().end)
}

pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(config, seed)
}

/// Borrows two disjoint ranges of one buffer mutably.
pub(crate) fn two_mut<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start || b.end <= a.start, "ranges overlap");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let a_len = a.end - a.start;
        (&mut hi[..a_len], &mut lo[b])
    }
}
