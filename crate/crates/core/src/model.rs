//! Two-stage SVDF encoder/decoder network.
//!
//! Each SVDF node is a rank-1 factorization of a (time x feature) filter: a
//! feature filter `a` projects the input frame to a scalar, and a time filter
//! `b` convolves the last `memory` projections. The encoder maps stacked
//! features to phoneme-class logits; the decoder reads those logits and emits
//! two keyword logits. Every SVDF activation is exposed as a named tap
//! (`en_0..`, `de_0..`) for the adversarial head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::frontend::{FeatureSequence, FEATURE_DIM};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdfLayerSpec {
    pub nodes: usize,
    pub memory: usize,
    /// Linear projection applied to the layer output before the next stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
}

impl SvdfLayerSpec {
    pub fn new(nodes: usize, memory: usize) -> Self {
        Self {
            nodes,
            memory,
            bottleneck: None,
        }
    }

    pub fn with_bottleneck(mut self, dim: usize) -> Self {
        self.bottleneck = Some(dim);
        self
    }

    pub fn output_dim(&self) -> usize {
        self.bottleneck.unwrap_or(self.nodes)
    }

    fn param_count(&self, input_dim: usize) -> usize {
        self.nodes * (input_dim + self.memory + 1) + self.bottleneck.map_or(0, |p| p * self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_layers: Vec<SvdfLayerSpec>,
    pub decoder_layers: Vec<SvdfLayerSpec>,
    /// Phoneme-like classes plus one non-speech class.
    pub encoder_classes: usize,
    pub decoder_classes: usize,
}

impl ModelConfig {
    /// Small network used by tests and the toy experiments (~3.4k params).
    pub fn toy(n_phonemes: usize) -> Self {
        Self {
            input_dim: FEATURE_DIM,
            encoder_layers: vec![
                SvdfLayerSpec::new(16, 4).with_bottleneck(8),
                SvdfLayerSpec::new(16, 4).with_bottleneck(8),
                SvdfLayerSpec::new(16, 4).with_bottleneck(8),
                SvdfLayerSpec::new(16, 4),
            ],
            decoder_layers: vec![
                SvdfLayerSpec::new(8, 4),
                SvdfLayerSpec::new(8, 4),
                SvdfLayerSpec::new(8, 4),
            ],
            encoder_classes: n_phonemes + 1,
            decoder_classes: 2,
        }
    }

    /// Full-size network: 4 encoder + 3 decoder SVDF layers, 3 bottlenecks,
    /// 12 phoneme classes; 321,231 parameters.
    pub fn paper_scale() -> Self {
        Self {
            input_dim: FEATURE_DIM,
            encoder_layers: vec![
                SvdfLayerSpec::new(576, 8).with_bottleneck(64),
                SvdfLayerSpec::new(576, 8).with_bottleneck(64),
                SvdfLayerSpec::new(576, 8).with_bottleneck(64),
                SvdfLayerSpec::new(128, 8),
            ],
            decoder_layers: vec![
                SvdfLayerSpec::new(128, 16),
                SvdfLayerSpec::new(128, 16),
                SvdfLayerSpec::new(128, 16),
            ],
            encoder_classes: 13,
            decoder_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(KwsError::Config("input_dim must be positive".into()));
        }
        if self.encoder_layers.is_empty() || self.decoder_layers.is_empty() {
            return Err(KwsError::Config(
                "encoder and decoder need at least one SVDF layer each".into(),
            ));
        }
        for (name, spec) in self.layer_names().iter().zip(self.layers()) {
            if spec.nodes == 0 || spec.memory == 0 || spec.bottleneck == Some(0) {
                return Err(KwsError::Config(format!(
                    "{name}: nodes, memory and bottleneck must be >= 1"
                )));
            }
        }
        if self.encoder_classes < 2 || self.decoder_classes != 2 {
            return Err(KwsError::Config(
                "encoder needs >= 2 classes and decoder exactly 2".into(),
            ));
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &SvdfLayerSpec> {
        self.encoder_layers.iter().chain(&self.decoder_layers)
    }

    fn layer_names(&self) -> Vec<String> {
        self.taps().iter().map(Tap::to_string).collect()
    }

    pub fn bottleneck_count(&self) -> usize {
        self.layers().filter(|l| l.bottleneck.is_some()).count()
    }

    fn encoder_input_dims(&self) -> Vec<usize> {
        stage_input_dims(self.input_dim, &self.encoder_layers)
    }

    fn decoder_input_dims(&self) -> Vec<usize> {
        stage_input_dims(self.encoder_classes, &self.decoder_layers)
    }

    fn encoder_output_dim(&self) -> usize {
        self.encoder_layers.last().map_or(self.input_dim, SvdfLayerSpec::output_dim)
    }

    fn decoder_output_dim(&self) -> usize {
        self.decoder_layers
            .last()
            .map_or(self.encoder_classes, SvdfLayerSpec::output_dim)
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let enc: usize = self
            .encoder_layers
            .iter()
            .zip(self.encoder_input_dims())
            .map(|(l, d)| l.param_count(d))
            .sum();
        let dec: usize = self
            .decoder_layers
            .iter()
            .zip(self.decoder_input_dims())
            .map(|(l, d)| l.param_count(d))
            .sum();
        let heads = self.encoder_classes * (self.encoder_output_dim() + 1)
            + self.decoder_classes * (self.decoder_output_dim() + 1);
        enc + dec + heads
    }

    /// All taps in canonical order.
    pub fn taps(&self) -> Vec<Tap> {
        (0..self.encoder_layers.len())
            .map(Tap::encoder)
            .chain((0..self.decoder_layers.len()).map(Tap::decoder))
            .collect()
    }

    pub fn tap_dim(&self, tap: Tap) -> Result<usize> {
        let layers = match tap.stage {
            Stage::Encoder => &self.encoder_layers,
            Stage::Decoder => &self.decoder_layers,
        };
        layers
            .get(tap.index)
            .map(|l| l.nodes)
            .ok_or_else(|| KwsError::Config(format!("tap {tap} does not exist in this model")))
    }

    /// Recovers a config from the tensor shapes of a checkpoint.
    pub fn infer(tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| KwsError::Checkpoint(format!("missing tensor {name}")))
        };
        let stage = |prefix: &str| -> Result<Vec<SvdfLayerSpec>> {
            let mut layers = Vec::new();
            while tensors.contains_key(&format!("{prefix}_{}.feature", layers.len())) {
                let i = layers.len();
                let feature = shape(&format!("{prefix}_{i}.feature"))?;
                let time = shape(&format!("{prefix}_{i}.time"))?;
                let bottleneck = tensors
                    .get(&format!("{prefix}_{i}.bottleneck"))
                    .map(|t| t.shape()[0]);
                if feature.len() != 2 || time.len() != 2 {
                    return Err(KwsError::Checkpoint(format!("{prefix}_{i}: bad rank")));
                }
                layers.push(SvdfLayerSpec {
                    nodes: feature[0],
                    memory: time[1],
                    bottleneck,
                });
            }
            Ok(layers)
        };
        let input_dim = *shape("en_0.feature")?
            .get(1)
            .ok_or_else(|| KwsError::Checkpoint("en_0.feature: bad rank".into()))?;
        let config = Self {
            input_dim,
            encoder_layers: stage("en")?,
            decoder_layers: stage("de")?,
            encoder_classes: shape("encoder_head.weight")?[0],
            decoder_classes: shape("decoder_head.weight")?[0],
        };
        config.validate()?;
        Ok(config)
    }
}

fn stage_input_dims(first: usize, layers: &[SvdfLayerSpec]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(layers.len());
    let mut d = first;
    for l in layers {
        dims.push(d);
        d = l.output_dim();
    }
    dims
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Decoder,
}

/// A hidden SVDF activation that can feed the adversarial head.
///
/// Ordering is canonical: all encoder layers, then all decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tap {
    pub stage: Stage,
    pub index: usize,
}

impl Tap {
    pub fn encoder(index: usize) -> Self {
        Self {
            stage: Stage::Encoder,
            index,
        }
    }

    pub fn decoder(index: usize) -> Self {
        Self {
            stage: Stage::Decoder,
            index,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Stage::Encoder => write!(f, "en_{}", self.index),
            Stage::Decoder => write!(f, "de_{}", self.index),
        }
    }
}

impl FromStr for Tap {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || KwsError::Config(format!("unknown tap name {s:?}; expected en_N or de_N"));
        let (prefix, idx) = s.trim().split_once('_').ok_or_else(bad)?;
        let index = idx.parse().map_err(|_| bad())?;
        match prefix {
            "en" => Ok(Tap::encoder(index)),
            "de" => Ok(Tap::decoder(index)),
            _ => Err(bad()),
        }
    }
}

/// Nonempty set of taps, iterated in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapSet(BTreeSet<Tap>);

impl TapSet {
    pub fn new(taps: impl IntoIterator<Item = Tap>) -> Result<Self> {
        let set: BTreeSet<Tap> = taps.into_iter().collect();
        if set.is_empty() {
            return Err(KwsError::Config("tap set must not be empty".into()));
        }
        Ok(Self(set))
    }

    pub fn all(config: &ModelConfig) -> Self {
        Self(config.taps().into_iter().collect())
    }

    pub fn parse(names: &[impl AsRef<str>]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| n.as_ref().parse())
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = Tap> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.iter().try_for_each(|t| config.tap_dim(t).map(|_| ()))
    }

    pub fn feature_dim(&self, config: &ModelConfig) -> Result<usize> {
        self.iter().map(|t| config.tap_dim(t)).sum()
    }
}

impl fmt::Display for TapSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|t| t.to_string()).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdfParams<T> {
    /// `[nodes, input_dim]`
    pub feature: Array2<T>,
    /// `[nodes, memory]`; column `k` weights the projection from `k` steps ago.
    pub time: Array2<T>,
    pub bias: Array1<T>,
    /// `[bottleneck, nodes]`
    pub bottleneck: Option<Array2<T>>,
}

impl<T: Real> SvdfParams<T> {
    fn zeros(spec: &SvdfLayerSpec, input_dim: usize) -> Self {
        Self {
            feature: Array2::zeros((spec.nodes, input_dim)),
            time: Array2::zeros((spec.nodes, spec.memory)),
            bias: Array1::zeros(spec.nodes),
            bottleneck: spec.bottleneck.map(|p| Array2::zeros((p, spec.nodes))),
        }
    }

    pub fn nodes(&self) -> usize {
        self.feature.nrows()
    }

    pub fn memory(&self) -> usize {
        self.time.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[outputs, inputs]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn forward_step(&self, x: ArrayView1<T>) -> Array1<T> {
        self.weight.dot(&x) + &self.bias
    }

    fn backward(&self, x: &Array2<T>, d_out: &Array2<T>, g: &mut Dense<T>) -> Array2<T> {
        g.weight += &d_out.t().dot(x);
        g.bias += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight)
    }
}

/// Named parameter tensors of the KWS network. The same type doubles as the
/// gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    pub encoder: Vec<SvdfParams<T>>,
    pub encoder_head: Dense<T>,
    pub decoder: Vec<SvdfParams<T>>,
    pub decoder_head: Dense<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: config
                .encoder_layers
                .iter()
                .zip(config.encoder_input_dims())
                .map(|(l, d)| SvdfParams::zeros(l, d))
                .collect(),
            encoder_head: Dense::zeros(config.encoder_classes, config.encoder_output_dim()),
            decoder: config
                .decoder_layers
                .iter()
                .zip(config.decoder_input_dims())
                .map(|(l, d)| SvdfParams::zeros(l, d))
                .collect(),
            decoder_head: Dense::zeros(config.decoder_classes, config.decoder_output_dim()),
        })
    }

    /// Glorot-uniform matrices, zero biases; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, mut tensor) in params.tensors_mut() {
            if tensor.ndim() != 2 || name.ends_with(".bias") {
                continue;
            }
            let (rows, cols) = (tensor.shape()[0], tensor.shape()[1]);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            tensor.iter_mut().for_each(|v| *v = T::of(rng.gen_range(-limit..limit)));
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        fn push_svdf<'a, T: Real>(prefix: &str, layers: &'a [SvdfParams<T>], out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}_{i}.feature"), l.feature.view().into_dyn()));
                out.push((format!("{prefix}_{i}.time"), l.time.view().into_dyn()));
                out.push((format!("{prefix}_{i}.bias"), l.bias.view().into_dyn()));
                if let Some(b) = &l.bottleneck {
                    out.push((format!("{prefix}_{i}.bottleneck"), b.view().into_dyn()));
                }
            }
        }
        let mut out = Vec::new();
        push_svdf("en", &self.encoder, &mut out);
        out.push(("encoder_head.weight".into(), self.encoder_head.weight.view().into_dyn()));
        out.push(("encoder_head.bias".into(), self.encoder_head.bias.view().into_dyn()));
        push_svdf("de", &self.decoder, &mut out);
        out.push(("decoder_head.weight".into(), self.decoder_head.weight.view().into_dyn()));
        out.push(("decoder_head.bias".into(), self.decoder_head.bias.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        fn push_svdf<'a, T: Real>(
            prefix: &str,
            layers: &'a mut [SvdfParams<T>],
            out: &mut Vec<(String, ArrayViewMutD<'a, T>)>,
        ) {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}_{i}.feature"), l.feature.view_mut().into_dyn()));
                out.push((format!("{prefix}_{i}.time"), l.time.view_mut().into_dyn()));
                out.push((format!("{prefix}_{i}.bias"), l.bias.view_mut().into_dyn()));
                if let Some(b) = &mut l.bottleneck {
                    out.push((format!("{prefix}_{i}.bottleneck"), b.view_mut().into_dyn()));
                }
            }
        }
        let mut out = Vec::new();
        push_svdf("en", &mut self.encoder, &mut out);
        out.push(("encoder_head.weight".into(), self.encoder_head.weight.view_mut().into_dyn()));
        out.push(("encoder_head.bias".into(), self.encoder_head.bias.view_mut().into_dyn()));
        push_svdf("de", &mut self.decoder, &mut out);
        out.push(("decoder_head.weight".into(), self.decoder_head.weight.view_mut().into_dyn()));
        out.push(("decoder_head.bias".into(), self.decoder_head.bias.view_mut().into_dyn()));
        out
    }

    /// Builds parameters for `config` from named tensors, checking every
    /// name and shape.
    pub fn from_tensors(config: &ModelConfig, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        for (name, mut dst) in params.tensors_mut() {
            let src = tensors
                .get(&name)
                .ok_or_else(|| KwsError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(KwsError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.zip_mut_with(src, |d, &s| *d = T::of(s as f64));
        }
        Ok(params)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("config already validated");
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::of(s.as_f64()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        for ((_, mut d), (_, s)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            d.zip_mut_with(&s, |d, &s| *d += factor * s);
        }
    }

    pub fn to_named_f32(&self) -> Vec<(String, ArrayD<f32>)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, t.mapv(|v| v.as_f64() as f32)))
            .collect()
    }

    pub fn forward_features(&self, features: &FeatureSequence) -> Result<ForwardTrace<T>> {
        self.forward_sequence(features.vectors.mapv(|v| T::of(v as f64)))
    }

    /// Whole-sequence forward pass with zero history before frame 0.
    pub fn forward_sequence(&self, input: Array2<T>) -> Result<ForwardTrace<T>> {
        if input.ncols() != self.config.input_dim {
            return Err(KwsError::Shape(format!(
                "input frames have {} dims, model expects {}",
                input.ncols(),
                self.config.input_dim
            )));
        }
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for layer in &self.encoder {
            let cache = svdf_forward(layer, x);
            x = cache.output().to_owned();
            encoder.push(cache);
        }
        let encoder_logits = self.encoder_head.forward(&x);
        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut x = encoder_logits.clone();
        for layer in &self.decoder {
            let cache = svdf_forward(layer, x);
            x = cache.output().to_owned();
            decoder.push(cache);
        }
        let decoder_logits = self.decoder_head.forward(&x);
        Ok(ForwardTrace {
            encoder_logits,
            decoder_logits,
            encoder,
            decoder,
        })
    }

    /// Accumulates parameter gradients for one sequence into `grads`.
    ///
    /// `d_encoder_logits` and `d_decoder_logits` are loss gradients w.r.t. the
    /// per-frame logits; `tap_grads` adds gradients arriving directly at tap
    /// activations (from the adversarial head).
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        d_encoder_logits: &Array2<T>,
        d_decoder_logits: &Array2<T>,
        tap_grads: &[(Tap, Array2<T>)],
        grads: &mut ModelParams<T>,
    ) -> Result<()> {
        let len = trace.len();
        if d_encoder_logits.dim() != trace.encoder_logits.dim()
            || d_decoder_logits.dim() != trace.decoder_logits.dim()
        {
            return Err(KwsError::Shape("logit gradient shape differs from trace".into()));
        }
        let tap_grad = |tap: Tap| -> Result<Option<&Array2<T>>> {
            match tap_grads.iter().find(|(t, _)| *t == tap) {
                Some((_, g)) if g.nrows() != len => Err(KwsError::Shape(format!(
                    "tap gradient for {tap} has {} frames, trace has {len}",
                    g.nrows()
                ))),
                Some((_, g)) => Ok(Some(g)),
                None => Ok(None),
            }
        };

        let last = trace.decoder.last().expect("decoder has layers");
        let mut d = self
            .decoder_head
            .backward(&last.output().to_owned(), d_decoder_logits, &mut grads.decoder_head);
        for i in (0..self.decoder.len()).rev() {
            d = svdf_backward(
                &self.decoder[i],
                &trace.decoder[i],
                d,
                tap_grad(Tap::decoder(i))?,
                &mut grads.decoder[i],
                true,
            )
            .expect("input gradient requested");
        }
        d += d_encoder_logits;

        let last = trace.encoder.last().expect("encoder has layers");
        let mut d = self
            .encoder_head
            .backward(&last.output().to_owned(), &d, &mut grads.encoder_head);
        for i in (0..self.encoder.len()).rev() {
            match svdf_backward(
                &self.encoder[i],
                &trace.encoder[i],
                d,
                tap_grad(Tap::encoder(i))?,
                &mut grads.encoder[i],
                i > 0,
            ) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }

    pub fn new_stream(&self) -> StreamState<T> {
        let ring = |l: &SvdfParams<T>| Ring {
            data: Array2::zeros((l.memory(), l.nodes())),
            head: 0,
        };
        StreamState {
            encoder: self.encoder.iter().map(ring).collect(),
            decoder: self.decoder.iter().map(ring).collect(),
            frames_seen: 0,
        }
    }

    /// Advances one stream by a single input frame.
    pub fn stream_step(&self, state: &mut StreamState<T>, x: ArrayView1<T>) -> Result<StepOutput<T>> {
        if x.len() != self.config.input_dim {
            return Err(KwsError::Shape(format!(
                "frame has {} dims, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let shaped = |rings: &[Ring<T>], layers: &[SvdfParams<T>]| {
            rings.len() == layers.len()
                && rings
                    .iter()
                    .zip(layers)
                    .all(|(r, l)| r.data.dim() == (l.memory(), l.nodes()))
        };
        if !shaped(&state.encoder, &self.encoder) || !shaped(&state.decoder, &self.decoder) {
            return Err(KwsError::Shape("stream state does not match model".into()));
        }

        let mut h = x.to_owned();
        for (layer, ring) in self.encoder.iter().zip(&mut state.encoder) {
            h = svdf_step(layer, ring, h.view());
        }
        let encoder_logits = self.encoder_head.forward_step(h.view());
        let mut h = encoder_logits.clone();
        for (layer, ring) in self.decoder.iter().zip(&mut state.decoder) {
            h = svdf_step(layer, ring, h.view());
        }
        let decoder_logits = self.decoder_head.forward_step(h.view());
        state.frames_seen += 1;
        Ok(StepOutput {
            encoder_logits,
            decoder_logits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    input: Array2<T>,
    /// Feature-filter projections, `[frames, nodes]`.
    filtered: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    projected: Option<Array2<T>>,
}

impl<T: Real> LayerCache<T> {
    fn output(&self) -> ArrayView2<'_, T> {
        self.projected.as_ref().unwrap_or(&self.act).view()
    }

    pub fn activation(&self) -> ArrayView2<'_, T> {
        self.act.view()
    }

    pub fn pre_activation(&self) -> ArrayView2<'_, T> {
        self.pre.view()
    }
}

/// Everything a whole-sequence forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `[frames, encoder_classes]`
    pub encoder_logits: Array2<T>,
    /// `[frames, 2]`; column 1 is the keyword logit.
    pub decoder_logits: Array2<T>,
    encoder: Vec<LayerCache<T>>,
    decoder: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.encoder_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tap(&self, tap: Tap) -> Result<ArrayView2<'_, T>> {
        let layers = match tap.stage {
            Stage::Encoder => &self.encoder,
            Stage::Decoder => &self.decoder,
        };
        layers
            .get(tap.index)
            .map(LayerCache::activation)
            .ok_or_else(|| KwsError::Config(format!("tap {tap} does not exist in this model")))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerCache<T>> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// ReLU on/off pattern over every unit and frame.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.layers()
            .flat_map(|l| l.pre.iter().map(|&z| z > T::zero()))
            .collect()
    }
}

/// Per-frame concatenation of the selected tap activations, `[frames, dim(H)]`.
pub fn collect_adv_features<T: Real>(trace: &ForwardTrace<T>, taps: &TapSet) -> Result<Array2<T>> {
    if taps.is_empty() {
        return Err(KwsError::Config("tap set must not be empty".into()));
    }
    let views = taps.iter().map(|t| trace.tap(t)).collect::<Result<Vec<_>>>()?;
    ndarray::concatenate(Axis(1), &views).map_err(|e| KwsError::Shape(e.to_string()))
}

/// Splits a gradient w.r.t. concatenated adversarial features back into per-tap blocks.
pub fn split_adv_gradient<T: Real>(
    config: &ModelConfig,
    taps: &TapSet,
    grad: &Array2<T>,
) -> Result<Vec<(Tap, Array2<T>)>> {
    let total = taps.feature_dim(config)?;
    if grad.ncols() != total {
        return Err(KwsError::Shape(format!(
            "adversarial gradient has {} columns, taps span {total}",
            grad.ncols()
        )));
    }
    let mut offset = 0;
    taps.iter()
        .map(|t| {
            let dim = config.tap_dim(t)?;
            let block = grad.slice(s![.., offset..offset + dim]).to_owned();
            offset += dim;
            Ok((t, block))
        })
        .collect()
}

fn svdf_forward<T: Real>(p: &SvdfParams<T>, input: Array2<T>) -> LayerCache<T> {
    let filtered = input.dot(&p.feature.t());
    let (len, nodes) = filtered.dim();
    let time_t = p.time.t().to_owned();
    let mut pre = Array2::<T>::zeros((len, nodes));
    for t in 0..len {
        let mut row = pre.row_mut(t);
        for k in 0..p.memory().min(t + 1) {
            let f = filtered.row(t - k);
            let b = time_t.row(k);
            ndarray::Zip::from(&mut row)
                .and(&b)
                .and(&f)
                .for_each(|z, &b, &f| *z += b * f);
        }
        row += &p.bias;
    }
    let act = pre.mapv(|z| if z > T::zero() { z } else { T::zero() });
    let projected = p.bottleneck.as_ref().map(|w| act.dot(&w.t()));
    LayerCache {
        input,
        filtered,
        pre,
        act,
        projected,
    }
}

fn svdf_backward<T: Real>(
    p: &SvdfParams<T>,
    cache: &LayerCache<T>,
    d_out: Array2<T>,
    tap_grad: Option<&Array2<T>>,
    g: &mut SvdfParams<T>,
    need_input_grad: bool,
) -> Option<Array2<T>> {
    let mut d_act = match (&p.bottleneck, &mut g.bottleneck) {
        (Some(w), Some(gw)) => {
            *gw += &d_out.t().dot(&cache.act);
            d_out.dot(w)
        }
        _ => d_out,
    };
    if let Some(tg) = tap_grad {
        d_act += tg;
    }
    let d_pre = ndarray::Zip::from(&d_act)
        .and(&cache.pre)
        .map_collect(|&d, &z| if z > T::zero() { d } else { T::zero() });
    g.bias += &d_pre.sum_axis(Axis(0));

    let (len, nodes) = d_pre.dim();
    let mut d_filtered = Array2::<T>::zeros((len, nodes));
    for t in 0..len {
        let dz = d_pre.row(t);
        for k in 0..p.memory().min(t + 1) {
            let f = cache.filtered.row(t - k);
            let mut gb = g.time.column_mut(k);
            ndarray::Zip::from(&mut gb)
                .and(&dz)
                .and(&f)
                .for_each(|gb, &dz, &f| *gb += dz * f);
            let b = p.time.column(k);
            let mut df = d_filtered.row_mut(t - k);
            ndarray::Zip::from(&mut df)
                .and(&dz)
                .and(&b)
                .for_each(|df, &dz, &b| *df += dz * b);
        }
    }
    g.feature += &d_filtered.t().dot(&cache.input);
    need_input_grad.then(|| d_filtered.dot(&p.feature))
}

#[derive(Debug, Clone, PartialEq)]
struct Ring<T> {
    /// `[memory, nodes]`; row `head - 1` holds the newest projection.
    data: Array2<T>,
    head: usize,
}

/// Per-stream SVDF memories. Belongs to exactly one audio stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T> {
    encoder: Vec<Ring<T>>,
    decoder: Vec<Ring<T>>,
    pub frames_seen: u64,
}

impl<T: Real> StreamState<T> {
    pub fn reset(&mut self) {
        for ring in self.encoder.iter_mut().chain(&mut self.decoder) {
            ring.data.fill(T::zero());
            ring.head = 0;
        }
        self.frames_seen = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub encoder_logits: Array1<T>,
    pub decoder_logits: Array1<T>,
}

fn svdf_step<T: Real>(p: &SvdfParams<T>, ring: &mut Ring<T>, x: ArrayView1<T>) -> Array1<T> {
    let memory = p.memory();
    let f = p.feature.dot(&x);
    ring.data.row_mut(ring.head).assign(&f);
    let mut z = Array1::<T>::zeros(p.nodes());
    for k in 0..memory {
        let slot = (ring.head + memory - k) % memory;
        ndarray::Zip::from(&mut z)
            .and(&p.time.column(k))
            .and(&ring.data.row(slot))
            .for_each(|z, &b, &f| *z += b * f);
    }
    ring.head = (ring.head + 1) % memory;
    z += &p.bias;
    let act = z.mapv(|v| if v > T::zero() { v } else { T::zero() });
    match &p.bottleneck {
        Some(w) => w.dot(&act),
        None => act,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn random_input(len: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((len, dim), |_| StandardNormal.sample(&mut rng))
    }

    fn jitter_biases(params: &mut ModelParams<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, mut t) in params.tensors_mut() {
            if name.ends_with(".bias") {
                t.mapv_inplace(|_| rng.gen_range(-0.2..0.3));
            }
        }
    }

    /// Explicit 2-D convolution with the rank-1 kernel `time[n] ⊗ feature[n]`.
    fn svdf_oracle(p: &SvdfParams<f64>, x: &Array2<f64>) -> Array2<f64> {
        let (len, dim) = x.dim();
        let (nodes, memory) = p.time.dim();
        let mut out = Array2::zeros((len, nodes));
        for n in 0..nodes {
            let kernel = Array2::from_shape_fn((memory, dim), |(k, d)| p.time[[n, k]] * p.feature[[n, d]]);
            for t in 0..len {
                let mut acc = p.bias[n];
                for k in 0..memory {
                    if t >= k {
                        for d in 0..dim {
                            acc += kernel[[k, d]] * x[[t - k, d]];
                        }
                    }
                }
                out[[t, n]] = acc.max(0.0);
            }
        }
        out
    }

    fn single_layer(nodes: usize, memory: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim: dim,
            encoder_layers: vec![SvdfLayerSpec::new(nodes, memory)],
            decoder_layers: vec![SvdfLayerSpec::new(2, 2)],
            encoder_classes: 3,
            decoder_classes: 2,
        }
    }

    #[test]
    fn single_node_count() {
        assert_eq!(SvdfLayerSpec::new(1, 4).param_count(120), 125);
    }

    #[test]
    fn toy_count_matches_enumeration() {
        let cfg = ModelConfig::toy(4);
        let by_hand = 16 * (120 + 4 + 1) + 8 * 16
            + 2 * (16 * (8 + 4 + 1) + 8 * 16)
            + 16 * (8 + 4 + 1)
            + 5 * 17
            + 8 * (5 + 4 + 1)
            + 2 * 8 * (8 + 4 + 1)
            + 2 * 9;
        assert_eq!(cfg.param_count(), by_hand);
        assert_eq!(by_hand, 3399);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(params.param_count(), by_hand);
    }

    #[test]
    fn paper_scale_preset_size() {
        let cfg = ModelConfig::paper_scale();
        assert_eq!(cfg.encoder_layers.len() + cfg.decoder_layers.len(), 7);
        assert_eq!(cfg.bottleneck_count(), 3);
        let n = cfg.param_count() as f64;
        assert!((n - 320_000.0).abs() <= 32_000.0, "{n}");
        assert_eq!(ModelParams::<f32>::zeros(&cfg).unwrap().param_count(), cfg.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::toy(4);
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, ModelParams::<f32>::init(&cfg, 7).unwrap());
        assert_ne!(a, ModelParams::<f32>::init(&cfg, 8).unwrap());
        let limit = (6.0f32 / (16.0 + 120.0)).sqrt();
        assert!(a.encoder[0].feature.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_params_zero_outputs() {
        let cfg = ModelConfig::toy(4);
        let params = ModelParams::<f64>::zeros(&cfg).unwrap();
        let trace = params.forward_sequence(random_input(9, 120, 1)).unwrap();
        assert!(trace.encoder_logits.iter().all(|&v| v == 0.0));
        assert!(trace.decoder_logits.iter().all(|&v| v == 0.0));
        for tap in cfg.taps() {
            assert!(trace.tap(tap).unwrap().iter().all(|&v| v == 0.0));
        }
        let mut state = params.new_stream();
        let out = params.stream_step(&mut state, Array1::zeros(120).view()).unwrap();
        assert!(out.decoder_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let params = ModelParams::<f64>::zeros(&ModelConfig::toy(4)).unwrap();
        assert!(matches!(
            params.forward_sequence(Array2::zeros((3, 119))),
            Err(KwsError::Shape(_))
        ));
        let mut state = params.new_stream();
        assert!(params.stream_step(&mut state, Array1::zeros(7).view()).is_err());
        let other = ModelParams::<f64>::zeros(&ModelConfig::paper_scale()).unwrap();
        let mut wrong = other.new_stream();
        assert!(params.stream_step(&mut wrong, Array1::zeros(120).view()).is_err());
    }

    #[test]
    fn svdf_layer_matches_explicit_convolution() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = rng.gen_range(1..6);
            let memory = rng.gen_range(1..6);
            let dim = rng.gen_range(1..10);
            let len = rng.gen_range(1..15);
            let mut params = ModelParams::<f64>::init(&single_layer(nodes, memory, dim), seed).unwrap();
            jitter_biases(&mut params, seed);
            let x = random_input(len, dim, seed + 100);
            let trace = params.forward_sequence(x.clone()).unwrap();
            let oracle = svdf_oracle(&params.encoder[0], &x);
            let got = trace.tap(Tap::encoder(0)).unwrap();
            for (a, b) in got.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_frame_matches_stream_step() {
        let params = ModelParams::<f32>::init(&ModelConfig::toy(4), 3).unwrap();
        let x = random_input(1, 120, 5).mapv(|v| v as f32);
        let trace = params.forward_sequence(x.clone()).unwrap();
        let mut state = params.new_stream();
        let out = params.stream_step(&mut state, x.row(0)).unwrap();
        for (a, b) in out.decoder_logits.iter().zip(trace.decoder_logits.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in out.encoder_logits.iter().zip(trace.encoder_logits.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stream_memory_carries_over() {
        let mut params = ModelParams::<f64>::init(&ModelConfig::toy(4), 3).unwrap();
        jitter_biases(&mut params, 3);
        let a = random_input(6, 120, 1);
        let b = random_input(6, 120, 2);
        let mut state = params.new_stream();
        for row in a.rows() {
            params.stream_step(&mut state, row).unwrap();
        }
        let carried = params.stream_step(&mut state, b.row(0)).unwrap();
        state.reset();
        let fresh = params.stream_step(&mut state, b.row(0)).unwrap();
        assert_ne!(carried, fresh);
    }

    #[test]
    fn causality() {
        let mut params = ModelParams::<f64>::init(&ModelConfig::toy(4), 11).unwrap();
        jitter_biases(&mut params, 11);
        let x = random_input(12, 120, 4);
        let base = params.forward_sequence(x.clone()).unwrap();
        let mut changed = x.clone();
        changed.row_mut(7).mapv_inplace(|v| v + 3.0);
        let after = params.forward_sequence(changed).unwrap();
        for t in 0..7 {
            assert_eq!(base.decoder_logits.row(t), after.decoder_logits.row(t));
            assert_eq!(base.encoder_logits.row(t), after.encoder_logits.row(t));
        }
    }

    #[test]
    fn adv_features_follow_canonical_order() {
        let cfg = ModelConfig::toy(4);
        let mut params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        jitter_biases(&mut params, 2);
        let trace = params.forward_sequence(random_input(5, 120, 9)).unwrap();

        let only = TapSet::parse(&["en_1"]).unwrap();
        assert_eq!(collect_adv_features(&trace, &only).unwrap(), trace.tap(Tap::encoder(1)).unwrap());

        let all = TapSet::all(&cfg);
        let h = collect_adv_features(&trace, &all).unwrap();
        assert_eq!(h.ncols(), 16 * 4 + 8 * 3);

        let a = TapSet::parse(&["de_2", "en_0", "en_3"]).unwrap();
        let b = TapSet::parse(&["en_3", "de_2", "en_0"]).unwrap();
        let ha = collect_adv_features(&trace, &a).unwrap();
        assert_eq!(ha, collect_adv_features(&trace, &b).unwrap());
        assert_eq!(ha.slice(s![.., ..16]), trace.tap(Tap::encoder(0)).unwrap());

        let parts = split_adv_gradient(&cfg, &a, &ha).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2].0, Tap::decoder(2));
        assert_eq!(parts[2].1, trace.tap(Tap::decoder(2)).unwrap());
    }

    #[test]
    fn tap_names_roundtrip() {
        for tap in ModelConfig::toy(4).taps() {
            assert_eq!(tap.to_string().parse::<Tap>().unwrap(), tap);
        }
        assert!("xx_0".parse::<Tap>().is_err());
        assert!(TapSet::new([]).is_err());
        assert!(TapSet::parse(&["en_9"]).unwrap().validate(&ModelConfig::toy(4)).is_err());
    }

    #[test]
    fn config_inference_from_tensors() {
        let cfg = ModelConfig::toy(4);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let map: BTreeMap<_, _> = params.to_named_f32().into_iter().collect();
        assert_eq!(ModelConfig::infer(&map).unwrap(), cfg);
        assert_eq!(ModelParams::<f32>::from_tensors(&cfg, &map).unwrap(), params);
    }
}
