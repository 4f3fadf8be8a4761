//! Binarized inference engine with sub-MAC tiling.
//!
//! A layer output is `2 * popcount(XNOR(w, x)) - beta > T`. A dot product of
//! length `beta` is executed on an array of `a` XNOR cells in
//! `ceil(beta / a)` invocations; each invocation yields a sub-MAC popcount in
//! `[0, a]`, which passes through a [`LevelTransform`] (clipping, error
//! model) before the digital accumulation. Convolutions run as the unrolled
//! matrix product so every MAC goes through the same path.
//!
//! The last chunk of a dot product is padded with forced-mismatch pairs,
//! which add nothing to the popcount, and `beta` stays the true length.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::levels::LevelSet;
use crate::seed::derive_seed;
use crate::variation::{ErrorMatrix, PmapSampler};

pub const MODEL_VERSION: u32 = 1;

/// `(channels, height, width)`.
pub type Shape = [usize; 3];

fn volume(shape: &Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "fc")]
    FullyConnected,
    #[serde(rename = "conv3x3")]
    Conv3x3,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
}

/// Batch-norm statistics a layer's thresholds were folded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub psi: Vec<f64>,
    pub eta: Vec<f64>,
}

impl BatchNormStats {
    pub fn fold(&self) -> Result<Vec<f64>> {
        (0..self.mu.len())
            .map(|i| fold_batchnorm(self.mu[i], self.sigma[i], self.psi[i], self.eta[i]))
            .collect()
    }
}

/// `T = mu - (sigma / psi) * eta`.
pub fn fold_batchnorm(mu: f64, sigma: f64, psi: f64, eta: f64) -> Result<f64> {
    if psi == 0.0 {
        return Err(invalid("batch-norm scale psi must be non-zero"));
    }
    let t = mu - (sigma / psi) * eta;
    if !t.is_finite() {
        return Err(invalid(format!("folded threshold is not finite ({t})")));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub input_shape: Shape,
    pub output_shape: Shape,
    /// Row-major `neurons x fan_in` matrix of -1/+1; convolution kernels are
    /// unrolled in `(channel, ky, kx)` order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<i8>,
    /// One threshold per neuron; empty for pooling and for the output layer.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<BatchNormStats>,
}

impl Layer {
    pub fn fully_connected(input_shape: Shape, outputs: usize, weights: Vec<i8>, thresholds: Vec<f64>) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            input_shape,
            output_shape: [outputs, 1, 1],
            weights,
            thresholds,
            batchnorm: None,
        }
    }

    pub fn conv3x3(input_shape: Shape, out_channels: usize, weights: Vec<i8>, thresholds: Vec<f64>) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            input_shape,
            output_shape: [
                out_channels,
                input_shape[1].saturating_sub(2),
                input_shape[2].saturating_sub(2),
            ],
            weights,
            thresholds,
            batchnorm: None,
        }
    }

    pub fn maxpool2x2(input_shape: Shape) -> Self {
        Self {
            kind: LayerKind::MaxPool2x2,
            input_shape,
            output_shape: [input_shape[0], input_shape[1] / 2, input_shape[2] / 2],
            weights: Vec::new(),
            thresholds: Vec::new(),
            batchnorm: None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        self.kind != LayerKind::MaxPool2x2
    }

    /// Number of neurons (weight rows).
    pub fn neurons(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool2x2 => 0,
            _ => self.output_shape[0],
        }
    }

    /// Dot-product length `beta`.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => volume(&self.input_shape),
            LayerKind::Conv3x3 => self.input_shape[0] * 9,
            LayerKind::MaxPool2x2 => 0,
        }
    }

    /// Columns of the unrolled input, `delta`.
    pub fn columns(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => 1,
            LayerKind::Conv3x3 => self.output_shape[1] * self.output_shape[2],
            LayerKind::MaxPool2x2 => 0,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.neurons() * self.fan_in()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected(usize),
    Conv3x3(usize),
    MaxPool2x2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub version: u32,
    pub input_shape: Shape,
    pub layers: Vec<Layer>,
    /// File name of the bit-packed weights, relative to the model file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_sidecar: Option<String>,
}

impl BnnModel {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            version: MODEL_VERSION,
            input_shape,
            layers,
            weights_sidecar: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(invalid(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                self.version
            )));
        }
        let last = self.layers.len().checked_sub(1).ok_or_else(|| invalid("model has no layers"))?;
        let mut shape = self.input_shape;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mismatch = |message: String| Error::ShapeMismatch { layer: idx, message };
            if layer.input_shape != shape {
                return Err(mismatch(format!(
                    "expects input {:?} but receives {:?}",
                    layer.input_shape, shape
                )));
            }
            let expected_out = match layer.kind {
                LayerKind::FullyConnected => [layer.output_shape[0], 1, 1],
                LayerKind::Conv3x3 => {
                    if shape[1] < 3 || shape[2] < 3 {
                        return Err(mismatch(format!("input {shape:?} too small for a 3x3 kernel")));
                    }
                    [layer.output_shape[0], shape[1] - 2, shape[2] - 2]
                }
                LayerKind::MaxPool2x2 => {
                    if shape[1] < 2 || shape[2] < 2 {
                        return Err(mismatch(format!("input {shape:?} too small for 2x2 pooling")));
                    }
                    [shape[0], shape[1] / 2, shape[2] / 2]
                }
            };
            if layer.output_shape != expected_out || volume(&expected_out) == 0 {
                return Err(mismatch(format!(
                    "output shape {:?} inconsistent (expected {expected_out:?})",
                    layer.output_shape
                )));
            }
            if layer.is_weighted() {
                if layer.weights.len() != layer.weight_count() {
                    return Err(mismatch(format!(
                        "has {} weights, needs {}",
                        layer.weights.len(),
                        layer.weight_count()
                    )));
                }
                if layer.weights.iter().any(|&w| w != 1 && w != -1) {
                    return Err(mismatch("weights must be -1 or +1".into()));
                }
                let needs_thresholds = idx != last;
                if needs_thresholds && layer.thresholds.len() != layer.neurons() {
                    return Err(mismatch(format!(
                        "has {} thresholds for {} neurons",
                        layer.thresholds.len(),
                        layer.neurons()
                    )));
                }
                if layer.thresholds.iter().any(|t| !t.is_finite()) {
                    return Err(mismatch("thresholds must be finite".into()));
                }
            }
            shape = layer.output_shape;
        }
        if self.layers[last].kind != LayerKind::FullyConnected {
            return Err(Error::ShapeMismatch {
                layer: last,
                message: "the output layer must be fully connected".into(),
            });
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.neurons()).unwrap_or(0)
    }

    /// Sub-MAC invocations in one forward pass:
    /// `sum over weighted layers of neurons * delta * ceil(beta / a)`.
    pub fn chunks_per_pass(&self, array_size: u32) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.is_weighted())
            .map(|l| {
                (l.neurons() * l.columns()) as u64 * l.fan_in().div_ceil(array_size as usize) as u64
            })
            .sum()
    }

    /// Random -1/+1 weights and small random thresholds; the output layer
    /// gets none.
    pub fn random(input_shape: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape;
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let is_last = idx + 1 == specs.len();
            let mut layer = match *spec {
                LayerSpec::FullyConnected(n) => Layer::fully_connected(shape, n, Vec::new(), Vec::new()),
                LayerSpec::Conv3x3(c) => Layer::conv3x3(shape, c, Vec::new(), Vec::new()),
                LayerSpec::MaxPool2x2 => Layer::maxpool2x2(shape),
            };
            if layer.is_weighted() {
                layer.weights = (0..layer.weight_count())
                    .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                    .collect();
                if !is_last {
                    let beta = layer.fan_in() as f64;
                    layer.thresholds = (0..layer.neurons())
                        .map(|_| (rng.random::<f64>() - 0.5) * beta.sqrt())
                        .collect();
                }
            }
            shape = layer.output_shape;
            layers.push(layer);
        }
        Self::new(input_shape, layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.weights_sidecar.is_none() {
            model.validate()?;
        }
        Ok(model)
    }

    /// Weights of all weighted layers, one bit per weight (1 = +1). Bits are
    /// little-endian within each byte (weight `i` of a layer is bit `i % 8`
    /// of byte `i / 8`); every layer starts on a fresh byte.
    pub fn packed_weights(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in self.layers.iter().filter(|l| l.is_weighted()) {
            let mut bytes = vec![0u8; layer.weights.len().div_ceil(8)];
            for (i, &w) in layer.weights.iter().enumerate() {
                if w > 0 {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend(bytes);
        }
        out
    }

    /// Inverse of [`packed_weights`](Self::packed_weights).
    pub fn unpack_weights(&mut self, bytes: &[u8]) -> Result<()> {
        let mut offset = 0;
        for layer in self.layers.iter_mut().filter(|l| l.is_weighted()) {
            let n = layer.weight_count();
            let len = n.div_ceil(8);
            let chunk = bytes.get(offset..offset + len).ok_or_else(|| Error::Parse {
                offset: bytes.len(),
                message: format!("weight sidecar truncated; needed {} bytes", offset + len),
            })?;
            layer.weights = (0..n)
                .map(|i| if chunk[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
                .collect();
            offset += len;
        }
        if offset != bytes.len() {
            return Err(Error::Parse {
                offset,
                message: format!("{} trailing bytes in weight sidecar", bytes.len() - offset),
            });
        }
        Ok(())
    }

    /// Writes the model as JSON; with `sidecar` the weights go to a packed
    /// binary next to it instead of the JSON arrays.
    pub fn save(&self, path: &Path, sidecar: bool) -> Result<()> {
        if sidecar {
            let name = format!(
                "{}.weights.bin",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("model")
            );
            let mut light = self.clone();
            for layer in &mut light.layers {
                layer.weights.clear();
            }
            light.weights_sidecar = Some(name.clone());
            fs::write(path.with_file_name(&name), self.packed_weights())?;
            fs::write(path, light.to_json()?)?;
        } else {
            let mut plain = self.clone();
            plain.weights_sidecar = None;
            fs::write(path, plain.to_json()?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model = Self::from_json(&fs::read_to_string(path)?)?;
        if let Some(name) = model.weights_sidecar.take() {
            let bytes = fs::read(path.with_file_name(name))?;
            model.unpack_weights(&bytes)?;
            model.validate()?;
        }
        Ok(model)
    }
}

/// How a sub-MAC popcount is altered before accumulation.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelTransform {
    Identity,
    Clip(LevelSet),
    /// Padded error matrix over `0..=a`.
    ErrorModel(ErrorMatrix),
    ClipThenErrorModel(LevelSet, ErrorMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubMacConfig {
    pub array_size: u32,
    pub transform: LevelTransform,
    /// Base seed; every sample derives its own stream from it.
    pub seed: u64,
}

impl SubMacConfig {
    pub fn identity(array_size: u32) -> Self {
        Self {
            array_size,
            transform: LevelTransform::Identity,
            seed: 0,
        }
    }

    pub fn with_transform(array_size: u32, transform: LevelTransform, seed: u64) -> Self {
        Self {
            array_size,
            transform,
            seed,
        }
    }

    pub fn compile(&self) -> Result<RuntimeTransform> {
        if self.array_size == 0 {
            return Err(invalid("array size must be at least 1"));
        }
        let a = self.array_size;
        let clip_table = |ls: &LevelSet| -> Result<Vec<u32>> {
            if ls.q_last > a {
                return Err(invalid(format!("level set reaches {} beyond array size {a}", ls.q_last)));
            }
            Ok(ls.clip_table(a))
        };
        let sampler = |em: &ErrorMatrix| -> Result<PmapSampler> {
            let s = em.sampler();
            if (0..=a).any(|l| !s.covers(l)) {
                return Err(invalid(format!(
                    "error model must cover every level 0..={a}; pad it first"
                )));
            }
            Ok(s)
        };
        let (clip, pmap) = match &self.transform {
            LevelTransform::Identity => (None, None),
            LevelTransform::Clip(ls) => (Some(clip_table(ls)?), None),
            LevelTransform::ErrorModel(em) => (None, Some(sampler(em)?)),
            LevelTransform::ClipThenErrorModel(ls, em) => (Some(clip_table(ls)?), Some(sampler(em)?)),
        };
        Ok(RuntimeTransform {
            array_size: a as usize,
            clip,
            pmap,
        })
    }
}

/// Compiled form of a [`SubMacConfig`] transform.
#[derive(Debug, Clone)]
pub struct RuntimeTransform {
    array_size: usize,
    clip: Option<Vec<u32>>,
    pmap: Option<PmapSampler>,
}

impl RuntimeTransform {
    pub fn array_size(&self) -> usize {
        self.array_size
    }

    pub fn is_random(&self) -> bool {
        self.pmap.is_some()
    }

    #[inline]
    fn apply<R: Rng + ?Sized>(&self, popcount: u32, rng: &mut R) -> Result<u32> {
        let mut level = popcount;
        if let Some(table) = &self.clip {
            level = table[level as usize];
        }
        if let Some(sampler) = &self.pmap {
            level = sampler.sample(level, rng)?;
        }
        Ok(level)
    }
}

fn check_signs(v: &[i8], what: &str) -> Result<()> {
    if v.iter().any(|&x| x != 1 && x != -1) {
        return Err(invalid(format!("{what} must contain only -1 and +1")));
    }
    Ok(())
}

/// Number of positions where `w` and `x` agree.
pub fn xnor_popcount(w: &[i8], x: &[i8]) -> Result<u32> {
    if w.len() != x.len() {
        return Err(invalid(format!("chunk lengths differ: {} vs {}", w.len(), x.len())));
    }
    check_signs(w, "weights")?;
    check_signs(x, "inputs")?;
    Ok(w.iter().zip(x).filter(|(a, b)| a == b).count() as u32)
}

/// Packs -1/+1 values into bits (1 = +1), LSB first.
pub fn pack_signs(v: &[i8]) -> Vec<u64> {
    let mut words = vec![0u64; v.len().div_ceil(64)];
    for (i, &s) in v.iter().enumerate() {
        if s > 0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// Agreements between `w` and `x` over bit positions `start..end`.
#[inline]
fn matches_in(w: &[u64], x: &[u64], start: usize, end: usize) -> u32 {
    let mut count = 0;
    let mut pos = start;
    while pos < end {
        let word = pos / 64;
        let offset = pos % 64;
        let take = (64 - offset).min(end - pos);
        let mask = if take == 64 { !0u64 } else { ((1u64 << take) - 1) << offset };
        count += (!(w[word] ^ x[word]) & mask).count_ones();
        pos += take;
    }
    count
}

#[inline]
fn tiled_mac_packed<R: Rng + ?Sized>(
    w: &[u64],
    x: &[u64],
    beta: usize,
    transform: &RuntimeTransform,
    rng: &mut R,
    mut hist: Option<&mut [u64]>,
) -> Result<i64> {
    let a = transform.array_size;
    let mut sum: i64 = 0;
    let mut start = 0;
    while start < beta {
        let end = (start + a).min(beta);
        let pop = matches_in(w, x, start, end);
        if let Some(h) = hist.as_deref_mut() {
            h[pop as usize] += 1;
        }
        sum += transform.apply(pop, rng)? as i64;
        start = end;
    }
    Ok(2 * sum - beta as i64)
}

/// Pre-activation `2 * sum(chunk popcounts) - beta` of one dot product, with
/// each chunk popcount passed through the configured transform.
pub fn tiled_mac<R: Rng + ?Sized>(w: &[i8], x: &[i8], cfg: &SubMacConfig, rng: &mut R) -> Result<i64> {
    if w.len() != x.len() {
        return Err(invalid(format!("operand lengths differ: {} vs {}", w.len(), x.len())));
    }
    if w.is_empty() {
        return Err(invalid("dot product needs at least one element"));
    }
    check_signs(w, "weights")?;
    check_signs(x, "inputs")?;
    let runtime = cfg.compile()?;
    tiled_mac_packed(&pack_signs(w), &pack_signs(x), w.len(), &runtime, rng, None)
}

#[derive(Debug, Clone)]
struct CompiledLayer {
    kind: LayerKind,
    input_shape: Shape,
    output_shape: Shape,
    rows: Vec<Vec<u64>>,
    fan_in: usize,
    thresholds: Vec<f64>,
}

/// Model with weights pre-packed for repeated inference.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    layers: Vec<CompiledLayer>,
    input_len: usize,
}

impl CompiledModel {
    pub fn new(model: &BnnModel) -> Result<Self> {
        model.validate()?;
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let fan_in = l.fan_in();
                let rows = if l.is_weighted() {
                    l.weights.chunks(fan_in).map(pack_signs).collect()
                } else {
                    Vec::new()
                };
                CompiledLayer {
                    kind: l.kind,
                    input_shape: l.input_shape,
                    output_shape: l.output_shape,
                    rows,
                    fan_in,
                    thresholds: l.thresholds.clone(),
                }
            })
            .collect();
        Ok(Self {
            layers,
            input_len: volume(&model.input_shape),
        })
    }

    /// Forward pass returning the output layer's pre-activations. When
    /// `hist` is given, every raw chunk popcount is counted into it.
    pub fn run<R: Rng + ?Sized>(
        &self,
        input: &[i8],
        transform: &RuntimeTransform,
        rng: &mut R,
        mut hist: Option<&mut [u64]>,
    ) -> Result<Vec<i64>> {
        if input.len() != self.input_len {
            return Err(Error::ShapeMismatch {
                layer: 0,
                message: format!("input has {} values, expected {}", input.len(), self.input_len),
            });
        }
        check_signs(input, "input")?;
        if let Some(h) = hist.as_deref() {
            if h.len() != transform.array_size + 1 {
                return Err(invalid("histogram length must be array size + 1"));
            }
        }
        let mut act: Vec<i8> = input.to_vec();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let is_last = idx == last;
            match layer.kind {
                LayerKind::FullyConnected => {
                    let xbits = pack_signs(&act);
                    let mut pre = Vec::with_capacity(layer.rows.len());
                    for row in &layer.rows {
                        pre.push(tiled_mac_packed(row, &xbits, layer.fan_in, transform, rng, hist.as_deref_mut())?);
                    }
                    if is_last {
                        return Ok(pre);
                    }
                    act = binarize_outputs(&pre, &layer.thresholds, 1);
                }
                LayerKind::Conv3x3 => {
                    let [cin, hin, win] = layer.input_shape;
                    let [cout, hout, wout] = layer.output_shape;
                    let mut pre = vec![0i64; cout * hout * wout];
                    let mut patch = vec![0i8; layer.fan_in];
                    for oy in 0..hout {
                        for ox in 0..wout {
                            for c in 0..cin {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        patch[c * 9 + ky * 3 + kx] =
                                            act[c * hin * win + (oy + ky) * win + (ox + kx)];
                                    }
                                }
                            }
                            let xbits = pack_signs(&patch);
                            for (o, row) in layer.rows.iter().enumerate() {
                                pre[o * hout * wout + oy * wout + ox] = tiled_mac_packed(
                                    row,
                                    &xbits,
                                    layer.fan_in,
                                    transform,
                                    rng,
                                    hist.as_deref_mut(),
                                )?;
                            }
                        }
                    }
                    act = binarize_outputs(&pre, &layer.thresholds, hout * wout);
                }
                LayerKind::MaxPool2x2 => {
                    let [c, hin, win] = layer.input_shape;
                    let [_, hout, wout] = layer.output_shape;
                    let mut out = vec![-1i8; c * hout * wout];
                    for ch in 0..c {
                        for oy in 0..hout {
                            for ox in 0..wout {
                                let base = ch * hin * win;
                                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .map(|(dy, dx)| act[base + (2 * oy + dy) * win + 2 * ox + dx])
                                    .max()
                                    .unwrap_or(-1);
                                out[ch * hout * wout + oy * wout + ox] = m;
                            }
                        }
                    }
                    act = out;
                }
            }
        }
        unreachable!("validated models end in a fully connected layer")
    }
}

/// `pre > T` -> +1, else -1; `per_threshold` consecutive outputs share a
/// neuron's threshold.
fn binarize_outputs(pre: &[i64], thresholds: &[f64], per_threshold: usize) -> Vec<i8> {
    pre.iter()
        .enumerate()
        .map(|(i, &v)| if v as f64 > thresholds[i / per_threshold] { 1 } else { -1 })
        .collect()
}

/// Class scores (output-layer pre-activations) for one input.
pub fn forward<R: Rng>(model: &BnnModel, input: &[i8], cfg: &SubMacConfig, rng: &mut R) -> Result<Vec<i64>> {
    let compiled = CompiledModel::new(model)?;
    let runtime = cfg.compile()?;
    compiled.run(input, &runtime, rng, None)
}

/// Index of the highest score, lowest index on ties.
pub fn argmax(scores: &[i64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-sample generator: stream `index` of the config's base seed.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64))
}

/// Predicted class of every sample, computed in parallel. Each sample draws
/// from its own generator, so results do not depend on scheduling.
pub fn predict_all(model: &BnnModel, dataset: &Dataset, cfg: &SubMacConfig) -> Result<Vec<usize>> {
    let compiled = CompiledModel::new(model)?;
    if dataset.shape != model.input_shape {
        return Err(Error::ShapeMismatch {
            layer: 0,
            message: format!(
                "dataset shape {:?} does not match model input {:?}",
                dataset.shape, model.input_shape
            ),
        });
    }
    let runtime = cfg.compile()?;
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(cfg.seed, i);
            compiled
                .run(&s.pixels, &runtime, &mut rng, None)
                .map(|scores| argmax(&scores))
        })
        .collect()
}

/// Number of correctly classified samples.
pub fn count_correct(model: &BnnModel, dataset: &Dataset, cfg: &SubMacConfig) -> Result<usize> {
    let preds = predict_all(model, dataset, cfg)?;
    Ok(preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| **p == s.label as usize)
        .count())
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &BnnModel, dataset: &Dataset, cfg: &SubMacConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    Ok(count_correct(model, dataset, cfg)? as f64 / dataset.len() as f64)
}
