//! Layers shared by the encoder, decoder and the stand-in SSL backbone.
//!
//! Sequence tensors are time-major inside the network: `[batch, time, channels]`.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Array, Param, Tape, Var};

/// Anything that owns parameters (and optionally non-trainable buffers).
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }
}

/// Per-call forward state: train/eval mode and pending buffer updates
/// (batch-norm running statistics) that the caller commits after the step.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    pub updates: Vec<(String, Array)>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        Self { train: true, updates: Vec::new() }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

pub fn filled(shape: &[usize], v: f64) -> Array {
    ArrayD::from_elem(IxDyn(shape), v)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(rng, &[inp, out], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[out], bound)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(&self.weight)) + tape.param(&self.bias)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), filled(&[dim], 1.0)),
            beta: Param::new(format!("{name}.beta"), filled(&[dim], 0.0)),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let last = x.shape().len() - 1;
        let centred = x - x.mean_axis(last, true);
        let var = centred.square().mean_axis(last, true);
        let normed = centred / var.offset(self.eps).sqrt();
        normed * tape.param(&self.gamma) + tape.param(&self.beta)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head self-attention over the time axis, no positional encoding.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(&format!("{name}.q"), dim, dim, rng),
            key: Linear::new(&format!("{name}.k"), dim, dim, rng),
            value: Linear::new(&format!("{name}.v"), dim, dim, rng),
            out: Linear::new(&format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        x.reshape(&[b, t, self.heads, d / self.heads]).permute(&[0, 2, 1, 3])
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.split_heads(self.query.forward(tape, x));
        let k = self.split_heads(self.key.forward(tape, x));
        let v = self.split_heads(self.value.forward(tape, x));
        let scores = q.bmm(k.transpose(2, 3)).scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(3);
        let ctx = attn.bmm(v).permute(&[0, 2, 1, 3]).reshape(&[b, t, d]);
        self.out.forward(tape, ctx)
    }
}

impl Module for MultiHeadAttention {
    fn params(&self) -> Vec<&Param> {
        [&self.query, &self.key, &self.value, &self.out].into_iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.out]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { up: Linear::new(&format!("{name}.up"), dim, hidden, rng), down: Linear::new(&format!("{name}.down"), hidden, dim, rng) }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.down.forward(tape, self.up.forward(tape, x).relu())
    }
}

impl Module for FeedForward {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.up.params_mut();
        v.extend(self.down.params_mut());
        v
    }
}

/// MHSA and FFN, each wrapped in a residual connection followed by layer norm.
#[derive(Clone, Debug)]
pub struct SaFnBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl SaFnBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(&format!("{name}.mhsa"), dim, heads, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, ffn_hidden, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let x = self.norm1.forward(tape, x + self.attention.forward(tape, x));
        self.norm2.forward(tape, x + self.ffn.forward(tape, x))
    }
}

impl Module for SaFnBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.attention.params();
        v.extend(self.norm1.params());
        v.extend(self.ffn.params());
        v.extend(self.norm2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.attention.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.ffn.params_mut());
        v.extend(self.norm2.params_mut());
        v
    }
}

/// Single-direction GRU with PyTorch gate ordering (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::new(format!("{name}.w_ih"), uniform(rng, &[inp, 3 * hidden], bound)),
            w_hh: Param::new(format!("{name}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound)),
            b_ih: Param::new(format!("{name}.b_ih"), uniform(rng, &[3 * hidden], bound)),
            b_hh: Param::new(format!("{name}.b_hh"), uniform(rng, &[3 * hidden], bound)),
            hidden,
        }
    }

    /// `[B, T, in] -> [B, T, H]`; `reverse` runs from the last frame to the first.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, reverse: bool) -> Var<'t> {
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        let h_dim = self.hidden;
        let gates_x = x.matmul(tape.param(&self.w_ih)) + tape.param(&self.b_ih);
        let w_hh = tape.param(&self.w_hh);
        let b_hh = tape.param(&self.b_hh);
        let mut h = tape.constant(ArrayD::zeros(IxDyn(&[b, h_dim])));
        let mut outs = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gx = gates_x.narrow(1, step, 1).squeeze(1);
            let gh = h.matmul(w_hh) + b_hh;
            let r = (gx.narrow(1, 0, h_dim) + gh.narrow(1, 0, h_dim)).sigmoid();
            let z = (gx.narrow(1, h_dim, h_dim) + gh.narrow(1, h_dim, h_dim)).sigmoid();
            let n = (gx.narrow(1, 2 * h_dim, h_dim) + r * gh.narrow(1, 2 * h_dim, h_dim)).tanh();
            // h' = (1 - z) * n + z * h
            h = n + z * (h - n);
            outs[step] = h;
        }
        tape.stack(&outs, 1)
    }
}

impl Module for Gru {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward_dir: Gru,
    pub backward_dir: Gru,
}

impl BiGru {
    pub fn new(name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            forward_dir: Gru::new(&format!("{name}.fwd"), inp, hidden, rng),
            backward_dir: Gru::new(&format!("{name}.bwd"), inp, hidden, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let f = self.forward_dir.forward(tape, x, false);
        let b = self.backward_dir.forward(tape, x, true);
        tape.concat(&[f, b], 2)
    }
}

impl Module for BiGru {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.forward_dir.params();
        v.extend(self.backward_dir.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.forward_dir.params_mut();
        v.extend(self.backward_dir.params_mut());
        v
    }
}

/// Shape-preserving (odd kernel, "same" padding) 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(rng, &[cout, cin, kernel, kernel], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[cout], bound)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let pad = self.kernel() / 2;
        x.conv2d(tape.param(&self.weight), Some(tape.param(&self.bias)), (pad, pad))
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 1-D convolution over `[B, C, T]` with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
}

impl Conv1d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(rng, &[cout, cin, kernel], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[cout], bound)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.conv1d(tape.param(&self.weight), Some(tape.param(&self.bias)), 1, self.kernel() / 2)
    }
}

impl Module for Conv1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalisation over axis 1 of an NCHW tensor.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), filled(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), filled(&[channels], 0.0)),
            running_mean: Param::frozen(format!("{name}.running_mean"), filled(&[channels], 0.0)),
            running_var: Param::frozen(format!("{name}.running_var"), filled(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, ctx: &mut ForwardCtx) -> Var<'t> {
        let c = x.shape()[1];
        let bshape = [1, c, 1, 1];
        let normed = if ctx.train {
            let mean = x.mean_axis(0, true).mean_axis(2, true).mean_axis(3, true);
            let centred = x - mean;
            let var = centred.square().mean_axis(0, true).mean_axis(2, true).mean_axis(3, true);
            let s = x.shape();
            let count = (s[0] * s[2] * s[3]) as f64;
            let bm = mean.value().to_shape(IxDyn(&[c])).unwrap().to_owned();
            let bv = var.value().to_shape(IxDyn(&[c])).unwrap().to_owned();
            let unbiased = if count > 1.0 { &bv * (count / (count - 1.0)) } else { bv.clone() };
            let m = self.momentum;
            ctx.updates.push((self.running_mean.name.clone(), &self.running_mean.value * (1.0 - m) + &bm * m));
            ctx.updates.push((self.running_var.name.clone(), &self.running_var.value * (1.0 - m) + &unbiased * m));
            centred / var.offset(self.eps).sqrt()
        } else {
            let mean = tape.constant(self.running_mean.value.to_shape(IxDyn(&bshape)).unwrap().to_owned());
            let std = self.running_var.value.mapv(|v| (v + self.eps).sqrt());
            let std = tape.constant(std.to_shape(IxDyn(&bshape)).unwrap().to_owned());
            (x - mean) / std
        };
        normed * tape.param(&self.gamma).reshape(&bshape) + tape.param(&self.beta).reshape(&bshape)
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Param> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Parametric ReLU with one slope per channel (axis 1).
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: Param,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        Self { slope: Param::new(format!("{name}.slope"), filled(&[channels], 0.25)) }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let rank = x.shape().len();
        let mut bshape = vec![1; rank];
        bshape[1] = self.slope.value.len();
        let a = tape.param(&self.slope).reshape(&bshape);
        x.relu() - a * x.neg().relu()
    }
}

impl Module for PRelu {
    fn params(&self) -> Vec<&Param> {
        vec![&self.slope]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.slope]
    }
}
