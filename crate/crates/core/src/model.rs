//! Convolutional text classifier: embedding, parallel valid convolutions of
//! several heights with ReLU and 1-max pooling, concatenation, and a
//! one-hidden-layer ReLU MLP producing class logits.
//!
//! Parameters are grouped into layers for pruning: the embedding is layer 0,
//! each convolution height (filters and biases together) is one layer, then
//! the MLP hidden and output layers. Row 0 of the embedding belongs to the pad
//! token; it is held at zero, never trained and never pruned.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::pruning::MaskSet;
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::SeqEncoding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub filter_heights: Vec<usize>,
    pub channels: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Published hyperparameters: heights 3/4/5 with 127 channels each,
    /// 417-dim embeddings, 117 hidden units, 500 subwords, dropout 0.285.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 417,
            filter_heights: vec![3, 4, 5],
            channels: 127,
            mlp_hidden: 117,
            num_classes: 2,
            max_len: 500,
            dropout: 0.285,
        }
    }

    /// Small model used for tests and synthetic experiments.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 16,
            filter_heights: vec![3, 4, 5],
            channels: 8,
            mlp_hidden: 8,
            num_classes: 2,
            max_len,
            dropout: 0.285,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("channels", self.channels),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least two classes".into()));
        }
        if self.filter_heights.is_empty() || self.filter_heights.contains(&0) {
            return Err(Error::Config("filter heights must be a non-empty list of positive sizes".into()));
        }
        let tallest = *self.filter_heights.iter().max().unwrap();
        if self.max_len < tallest {
            return Err(Error::Config(format!("max_len {} shorter than tallest filter {tallest}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the pooled feature vector fed to the MLP.
    pub fn feature_width(&self) -> usize {
        self.channels * self.filter_heights.len()
    }

    pub fn num_layers(&self) -> usize {
        self.filter_heights.len() + 3
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let mut specs = vec![ParamSpec::new("embedding", vec![self.vocab_size, d], 0, ParamKind::Embedding)];
        for (i, &h) in self.filter_heights.iter().enumerate() {
            specs.push(ParamSpec::new(&format!("conv{h}.weight"), vec![self.channels, h, d], i + 1, ParamKind::Weight { fan_in: h * d }));
            specs.push(ParamSpec::new(&format!("conv{h}.bias"), vec![self.channels], i + 1, ParamKind::Bias));
        }
        let hidden_layer = self.filter_heights.len() + 1;
        let f = self.feature_width();
        specs.push(ParamSpec::new("mlp.hidden.weight", vec![f, self.mlp_hidden], hidden_layer, ParamKind::Weight { fan_in: f }));
        specs.push(ParamSpec::new("mlp.hidden.bias", vec![self.mlp_hidden], hidden_layer, ParamKind::Bias));
        specs.push(ParamSpec::new("mlp.out.weight", vec![self.mlp_hidden, self.num_classes], hidden_layer + 1, ParamKind::Weight { fan_in: self.mlp_hidden }));
        specs.push(ParamSpec::new("mlp.out.bias", vec![self.num_classes], hidden_layer + 1, ParamKind::Bias));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight { fan_in: usize },
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: &str, shape: Vec<usize>, layer: usize, kind: ParamKind) -> Self {
        ParamSpec { name: name.to_string(), shape, layer, kind }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leading flat positions that are never trained or pruned (the pad row).
    pub fn frozen_prefix(&self) -> usize {
        match self.kind {
            ParamKind::Embedding => self.shape[1],
            _ => 0,
        }
    }
}

/// Trainable parameters per layer, pad row included.
pub fn count_params(cfg: &ModelConfig) -> Vec<usize> {
    let mut counts = vec![0; cfg.num_layers()];
    for s in cfg.param_specs() {
        counts[s.layer] += s.len();
    }
    counts
}

/// Per-layer counts of positions eligible for pruning (pad row excluded).
pub fn prunable_counts(cfg: &ModelConfig) -> Vec<usize> {
    let mut counts = vec![0; cfg.num_layers()];
    for s in cfg.param_specs() {
        counts[s.layer] += s.len() - s.frozen_prefix();
    }
    counts
}

/// Uniform bound `sqrt(6 / ((1 + a²) · fan_in))` for He initialization.
pub fn he_bound(a: f64, fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Config("fan_in must be at least 1".into()));
    }
    Ok((6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let specs = cfg.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Data(format!("expected {} parameter tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::ShapeMismatch { left: s.shape.clone(), right: t.shape().to_vec() });
            }
        }
        Ok(ParamSet { specs, tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let specs = cfg.param_specs();
        let tensors = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        ParamSet { specs, tensors }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { specs: self.specs.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// `m ⊙ θ`.
    pub fn masked(&self, mask: &MaskSet) -> Result<Self> {
        let mut out = self.clone();
        mask.apply(&mut out.tensors)?;
        Ok(out)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            t.ensure_finite(&s.name)?;
        }
        Ok(())
    }
}

/// Draws a fresh parameter set: N(0, 1) embeddings (pad row zero), He-uniform
/// weights with `a = 0`, zero biases.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let specs = cfg.param_specs();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tensors = Vec::with_capacity(specs.len());
    for s in &specs {
        let n = s.len();
        let data: Vec<T> = match s.kind {
            ParamKind::Embedding => {
                let frozen = s.frozen_prefix();
                (0..n).map(|i| if i < frozen { T::zero() } else { T::lit(normal.sample(rng)) }).collect()
            }
            ParamKind::Weight { fan_in } => {
                let b = he_bound(0.0, fan_in)?;
                let u = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| T::lit(u.sample(rng)).max(T::lit(-b)).min(T::lit(b))).collect()
            }
            ParamKind::Bias => vec![T::zero(); n],
        };
        tensors.push(Tensor::new(s.shape.clone(), data)?);
    }
    Ok(ParamSet { specs, tensors })
}

/// Recorded forward pass: the tape, the leaf for each parameter tensor, and
/// the `[batch, classes]` logits.
pub struct Forward<T> {
    pub tape: GradTape<T>,
    pub params: Vec<Var>,
    pub logits: Var,
}

impl<T: Scalar> Forward<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }
}

/// Runs the classifier on a batch of fixed-length encodings. With a mask the
/// effective parameters are `m ⊙ θ`; the pad row is always read as zero.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    mask: Option<&MaskSet>,
    batch: &[&SeqEncoding],
    mode: Mode,
    rng: &mut R,
) -> Result<Forward<T>> {
    if params.specs != cfg.param_specs() {
        return Err(Error::Config("parameter set does not match model config".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("forward batch"));
    }
    let n = cfg.max_len;
    let mut ids = Vec::with_capacity(batch.len() * n);
    for enc in batch {
        if enc.ids.len() != n {
            return Err(Error::ShapeMismatch { left: vec![n], right: vec![enc.ids.len()] });
        }
        ids.extend(enc.ids.iter().map(|&i| i as usize));
    }

    let mut effective = match mask {
        Some(m) => params.masked(m)?,
        None => params.clone(),
    };
    let frozen = effective.specs[0].frozen_prefix();
    effective.tensors[0].data_mut()[..frozen].fill(T::zero());

    let mut tape = GradTape::new();
    let vars = effective.tensors.into_iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let emb = tape.embedding(vars[0], &ids, batch.len(), n)?;
    let emb = tape.dropout(emb, cfg.dropout, mode, rng)?;
    let mut pooled = Vec::with_capacity(cfg.filter_heights.len());
    for i in 0..cfg.filter_heights.len() {
        let c = tape.conv1d(emb, vars[1 + 2 * i], vars[2 + 2 * i])?;
        let c = tape.relu(c)?;
        pooled.push(tape.max_pool(c)?);
    }
    let features = tape.concat(&pooled)?;
    let k = 1 + 2 * cfg.filter_heights.len();
    let hidden = tape.linear(features, vars[k], vars[k + 1])?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.linear(hidden, vars[k + 2], vars[k + 3])?;
    Ok(Forward { tape, params: vars, logits })
}

/// Mean cross-entropy loss and its gradient with respect to the effective
/// parameters, one tensor per parameter. The pad row's gradient is zero.
pub fn loss_and_grads<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    mask: Option<&MaskSet>,
    batch: &[&SeqEncoding],
    labels: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(T, Vec<Tensor<T>>)> {
    let Forward { mut tape, params: vars, logits } = forward(cfg, params, mask, batch, mode, rng)?;
    let loss = tape.softmax_ce(logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(vars.len());
    for (v, spec) in vars.iter().zip(params.specs()) {
        let mut g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&spec.shape));
        g.data_mut()[..spec.frozen_prefix()].fill(T::zero());
        out.push(g);
    }
    Ok((value, out))
}

/// Predicted class per example (eval mode, no dropout).
pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>, mask: Option<&MaskSet>, inputs: &[&SeqEncoding], batch_size: usize) -> Result<Vec<usize>> {
    // eval mode draws nothing from the stream
    let mut rng = crate::rng::stream(0, crate::rng::Stream::Dropout, &[]);
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let f = forward(cfg, params, mask, chunk, Mode::Eval, &mut rng)?;
        let logits = f.logits();
        for row in logits.data().chunks_exact(cfg.num_classes) {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            out.push(best);
        }
    }
    Ok(out)
}
