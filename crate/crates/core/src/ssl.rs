//! Self-supervised feature path: per-layer hidden states from a backbone,
//! two softmax-weighted layer sums (magnitude and phase), per-frame gating,
//! and resampling of SSL frames onto the STFT frame grid.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Param, Tape, Var};
use crate::nn::{Linear, Module, SaFnBlock};
use crate::{Error, Result};

/// Hidden states of every transformer layer, each `[B, T', D]`.
#[derive(Clone, Debug)]
pub struct LayerStack<'t> {
    pub layers: Vec<Var<'t>>,
}

impl<'t> LayerStack<'t> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[1])
    }
}

/// Contract for SSL backbones (WavLM, Data2vec or the stand-in below).
///
/// `forward` receives a `[B, L]` batch of waveforms and must return exactly
/// `layer_count()` tensors of shape `[B, floor(L / frame_stride), hidden_dim()]`.
/// Layers whose trainability flag is false must enter the tape as constants.
pub trait SslBackbone: Module {
    fn layer_count(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn frame_stride(&self) -> usize;
    fn trainability_mask(&self) -> Vec<bool>;
    fn set_trainability_mask(&mut self, mask: &[bool]) -> Result<()>;
    fn forward<'t>(&self, tape: &'t Tape, waves: &Array) -> Result<LayerStack<'t>>;

    /// Trainable parameter count of the backbone as currently masked.
    fn trainable_params(&self) -> usize {
        self.trainable_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub frame_stride: usize,
    /// Top transformer layers unfrozen under partial fine-tuning.
    pub trainable_top_layers: usize,
    pub mpfs_reduction: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self { layers: 4, hidden_dim: 32, heads: 4, ffn_dim: 64, frame_stride: 320, trainable_top_layers: 2, mpfs_reduction: 4 }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.frame_stride == 0 {
            return Err(Error::config("ssl layers, hidden_dim and frame_stride must be positive"));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::config(format!("ssl hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads)));
        }
        if self.mpfs_reduction == 0 || self.hidden_dim / self.mpfs_reduction == 0 {
            return Err(Error::config("mpfs_reduction must leave at least one hidden unit"));
        }
        if self.trainable_top_layers > self.layers {
            return Err(Error::config("trainable_top_layers exceeds layer count"));
        }
        Ok(())
    }

    /// Partial fine-tuning policy: only the top layers are trainable.
    pub fn pf_mask(&self, partial_finetune: bool) -> Vec<bool> {
        (0..self.layers).map(|i| partial_finetune && i >= self.layers - self.trainable_top_layers).collect()
    }
}

/// Small randomly initialised transformer standing in for a pretrained SSL
/// model: non-overlapping `frame_stride`-sample frames, a linear frontend,
/// then post-norm transformer layers.
#[derive(Clone, Debug)]
pub struct StandInBackbone {
    pub frontend: Linear,
    pub layers: Vec<SaFnBlock>,
    stride: usize,
}

impl StandInBackbone {
    pub fn new(cfg: &SslConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frontend = Linear::new("ssl.backbone.frontend", cfg.frame_stride, cfg.hidden_dim, &mut rng);
        frontend.set_trainable(false);
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut l = SaFnBlock::new(&format!("ssl.backbone.layer{i}"), cfg.hidden_dim, cfg.heads, cfg.ffn_dim, &mut rng);
                l.set_trainable(false);
                l
            })
            .collect();
        Self { frontend, layers, stride: cfg.frame_stride }
    }
}

impl Module for StandInBackbone {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.frontend.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.frontend.params_mut();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v
    }
}

impl SslBackbone for StandInBackbone {
    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn hidden_dim(&self) -> usize {
        self.frontend.out_dim()
    }

    fn frame_stride(&self) -> usize {
        self.stride
    }

    fn trainability_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.params().iter().all(|p| p.trainable)).collect()
    }

    fn set_trainability_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::config(format!("mask of {} entries for {} layers", mask.len(), self.layers.len())));
        }
        for (l, &t) in self.layers.iter_mut().zip(mask) {
            l.set_trainable(t);
        }
        Ok(())
    }

    fn forward<'t>(&self, tape: &'t Tape, waves: &Array) -> Result<LayerStack<'t>> {
        if waves.ndim() != 2 {
            return Err(Error::input(format!("expected [batch, samples] waveforms, got {:?}", waves.shape())));
        }
        let (b, len) = (waves.shape()[0], waves.shape()[1]);
        let frames = len / self.stride;
        if frames == 0 {
            return Err(Error::input(format!("waveform of {len} samples is shorter than the SSL stride {}", self.stride)));
        }
        let framed = tape
            .constant(waves.clone())
            .narrow(1, 0, frames * self.stride)
            .reshape(&[b, frames, self.stride]);
        let mut h = self.frontend.forward(tape, framed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.forward(tape, h);
            layers.push(h);
        }
        Ok(LayerStack { layers })
    }
}

/// Trainable logits whose softmax gives per-layer weights on the simplex.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub logits: Param,
}

impl LayerWeights {
    pub fn new(name: &str, layers: usize) -> Self {
        Self { logits: Param::new(format!("{name}.logits"), ArrayD::zeros(IxDyn(&[layers]))) }
    }

    pub fn len(&self) -> usize {
        self.logits.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalized(&self) -> Vec<f64> {
        softmax(self.logits.value.as_slice().unwrap())
    }

    pub fn forward<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(&self.logits).softmax(0)
    }
}

impl Module for LayerWeights {
    fn params(&self) -> Vec<&Param> {
        vec![&self.logits]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.logits]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `sum_i w_i * z_i` with `w = softmax(logits)`.
pub fn weighted_sum<'t>(tape: &'t Tape, stack: &LayerStack<'t>, weights: &LayerWeights) -> Result<Var<'t>> {
    if stack.len() != weights.len() {
        return Err(Error::config(format!("{} layer weights for {} layers", weights.len(), stack.len())));
    }
    let w = weights.forward(tape);
    let mut acc: Option<Var<'t>> = None;
    for (i, &z) in stack.layers.iter().enumerate() {
        let term = z * w.narrow(0, i, 1);
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    Ok(acc.expect("nonempty stack"))
}

/// Per-frame `sigmoid(W2 relu(W1 x)) * x` over the channel vector.
#[derive(Clone, Debug)]
pub struct MpfsGate {
    pub reduce: Linear,
    pub expand: Linear,
}

impl MpfsGate {
    pub fn new(name: &str, dim: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (dim / reduction).max(1);
        Self {
            reduce: Linear::new(&format!("{name}.reduce"), dim, hidden, rng),
            expand: Linear::new(&format!("{name}.expand"), hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.reduce.in_dim()
    }

    pub fn gate<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
        let d = *features.shape().last().unwrap();
        if d != self.dim() {
            return Err(Error::config(format!("features have {d} channels, gate expects {}", self.dim())));
        }
        Ok(self.expand.forward(tape, self.reduce.forward(tape, features).relu()).sigmoid())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
        Ok(self.gate(tape, features)? * features)
    }
}

impl Module for MpfsGate {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.reduce.params();
        v.extend(self.expand.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.reduce.params_mut();
        v.extend(self.expand.params_mut());
        v
    }
}

/// One feature-separated path: layer weights followed by the gate.
#[derive(Clone, Debug)]
pub struct FsSslPath {
    pub weights: LayerWeights,
    pub gate: MpfsGate,
}

impl FsSslPath {
    pub fn new(name: &str, layers: usize, dim: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weights: LayerWeights::new(&format!("{name}.weights"), layers),
            gate: MpfsGate::new(&format!("{name}.gate"), dim, reduction, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, stack: &LayerStack<'t>) -> Result<Var<'t>> {
        let summed = weighted_sum(tape, stack, &self.weights)?;
        self.gate.forward(tape, summed)
    }
}

impl Module for FsSslPath {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.weights.params();
        v.extend(self.gate.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.weights.params_mut();
        v.extend(self.gate.params_mut());
        v
    }
}

/// `[T', T]` matrix of linear-interpolation weights mapping `src` frames onto
/// `dst` uniformly spaced positions (first and last frames aligned).
pub fn interpolation_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((src, dst));
    for j in 0..dst {
        let pos = if dst == 1 { 0.0 } else { j as f64 * (src - 1) as f64 / (dst - 1) as f64 };
        let i0 = (pos.floor() as usize).min(src - 1);
        let frac = pos - i0 as f64;
        m[[i0, j]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i0 + 1, j]] += frac;
        }
    }
    m
}

/// Resample `[B, T', D]` features to `[B, T, D]` along time.
pub fn align_time<'t>(tape: &'t Tape, features: Var<'t>, target_frames: usize) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::input(format!("cannot align empty features of shape {s:?}")));
    }
    if target_frames == 0 {
        return Err(Error::input("target frame count must be positive"));
    }
    if s[1] == target_frames {
        return Ok(features);
    }
    let m = tape.constant(interpolation_matrix(s[1], target_frames).into_dyn());
    Ok(features.transpose(1, 2).matmul(m).transpose(1, 2))
}
