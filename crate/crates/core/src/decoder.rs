//! Mask decoder: projection, self-attention block, bidirectional GRU,
//! time-frequency attention block, output projection and a learnable
//! sigmoid gate.
//!
//! Public entry points take channel-first `[B, C, T]` tensors; the blocks
//! in between run time-major.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Param, Tape, Var};
use crate::nn::{filled, BiGru, Conv1d, FeedForward, LayerNorm, Linear, Module, SaFnBlock};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemaConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub tfa_time_kernel: usize,
    pub tfa_hidden_channels: usize,
    pub tfa_reduction: usize,
    pub repeats: usize,
    pub gate_kernel: usize,
}

impl Default for RemaConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            heads: 4,
            ffn_expansion: 4,
            tfa_time_kernel: 7,
            tfa_hidden_channels: 8,
            tfa_reduction: 4,
            repeats: 1,
            gate_kernel: 1,
        }
    }
}

impl RemaConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return Err(Error::config(format!("model_dim {d} is not divisible by {} heads", self.heads)));
        }
        if d % 2 != 0 {
            return Err(Error::config(format!("model_dim {d} must be even for the bidirectional GRU")));
        }
        if self.tfa_time_kernel % 2 == 0 || self.gate_kernel % 2 == 0 {
            return Err(Error::config("tfa_time_kernel and gate_kernel must be odd"));
        }
        if self.tfa_reduction == 0 || d / self.tfa_reduction == 0 {
            return Err(Error::config("tfa_reduction leaves no hidden units"));
        }
        if self.ffn_expansion == 0 || self.tfa_hidden_channels == 0 || self.repeats == 0 {
            return Err(Error::config("ffn_expansion, tfa_hidden_channels and repeats must be positive"));
        }
        Ok(())
    }
}

/// Numerically stable `beta / (1 + exp(1 - alpha * t))`.
pub fn lsigmoid(t: f64, alpha: f64, beta: f64) -> f64 {
    let u = alpha * t - 1.0;
    let s = if u >= 0.0 { 1.0 / (1.0 + (-u).exp()) } else { u.exp() / (1.0 + u.exp()) };
    beta * s
}

/// Time attention and frequency attention over a `[B, F, T]` map.
#[derive(Clone, Debug)]
pub struct Tfa {
    pub ta_conv1: Conv1d,
    pub ta_conv2: Conv1d,
    pub fa_fc1: Linear,
    pub fa_fc2: Linear,
}

impl Tfa {
    pub fn new(name: &str, channels: usize, cfg: &RemaConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.tfa_time_kernel;
        let hidden = (channels / cfg.tfa_reduction).max(1);
        Self {
            ta_conv1: Conv1d::new(&format!("{name}.ta1"), 2, cfg.tfa_hidden_channels, k, rng),
            ta_conv2: Conv1d::new(&format!("{name}.ta2"), cfg.tfa_hidden_channels, 1, k, rng),
            fa_fc1: Linear::new(&format!("{name}.fa1"), channels, hidden, rng),
            fa_fc2: Linear::new(&format!("{name}.fa2"), hidden, channels, rng),
        }
    }

    /// `([B, F, 1] frequency weights, [B, 1, T] time weights)`.
    pub fn weights<'t>(&self, tape: &'t Tape, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let pooled_f = tape.concat(&[x.max_axis(1, true), x.mean_axis(1, true)], 1);
        let ta = self.ta_conv2.forward(tape, self.ta_conv1.forward(tape, pooled_f).relu()).sigmoid();
        let pooled_t = (x.max_axis(2, true) + x.mean_axis(2, true)).transpose(1, 2);
        let fa = self.fa_fc2.forward(tape, self.fa_fc1.forward(tape, pooled_t).relu()).sigmoid().transpose(1, 2);
        (fa, ta)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let (fa, ta) = self.weights(tape, x);
        x * (fa * ta)
    }
}

impl Module for Tfa {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.ta_conv1.params();
        v.extend(self.ta_conv2.params());
        v.extend(self.fa_fc1.params());
        v.extend(self.fa_fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ta_conv1.params_mut();
        v.extend(self.ta_conv2.params_mut());
        v.extend(self.fa_fc1.params_mut());
        v.extend(self.fa_fc2.params_mut());
        v
    }
}

/// `LN(x + TFA(x))` then `LN(h + FFN(h))`, on time-major `[B, T, d]`.
#[derive(Clone, Debug)]
pub struct TfaFnBlock {
    pub tfa: Tfa,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl TfaFnBlock {
    pub fn new(name: &str, cfg: &RemaConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            tfa: Tfa::new(&format!("{name}.tfa"), d, cfg, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), d),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, d * cfg.ffn_expansion, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), d),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let attended = self.tfa.forward(tape, x.transpose(1, 2)).transpose(1, 2);
        let h = self.norm1.forward(tape, x + attended);
        self.norm2.forward(tape, h + self.ffn.forward(tape, h))
    }
}

impl Module for TfaFnBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.tfa.params();
        v.extend(self.norm1.params());
        v.extend(self.ffn.params());
        v.extend(self.norm2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.tfa.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.ffn.params_mut());
        v.extend(self.norm2.params_mut());
        v
    }
}

/// `LSigmoid(Conv1d(ReLU(z)))` with a per-frequency slope and `beta = 1`.
#[derive(Clone, Debug)]
pub struct MaskGate {
    pub conv: Conv1d,
    pub alpha: Param,
    pub beta: f64,
}

impl MaskGate {
    pub fn new(name: &str, freq_bins: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv1d::new(&format!("{name}.conv"), freq_bins, freq_bins, kernel, rng),
            alpha: Param::new(format!("{name}.alpha"), filled(&[freq_bins], 1.0)),
            beta: 1.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.value.len()
    }

    /// `z` is `[B, F, T]`; the result has the same shape with values in (0, beta).
    pub fn forward<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        if s.len() != 3 || s[1] != self.channels() {
            return Err(Error::config(format!("mask gate expects {} channels, got shape {s:?}", self.channels())));
        }
        let t = self.conv.forward(tape, z.relu());
        let alpha = tape.param(&self.alpha).reshape(&[1, self.channels(), 1]);
        let gate = (t * alpha).offset(-1.0).sigmoid();
        Ok(if self.beta == 1.0 { gate } else { gate.scale(self.beta) })
    }
}

impl Module for MaskGate {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.push(&self.alpha);
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.push(&mut self.alpha);
        v
    }
}

/// One SA-FN, sBi-GRU, TFA-FN stage.
#[derive(Clone, Debug)]
pub struct RemaStage {
    pub safn: SaFnBlock,
    pub gru: BiGru,
    pub tfafn: TfaFnBlock,
}

impl Module for RemaStage {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.safn.params();
        v.extend(self.gru.params());
        v.extend(self.tfafn.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.safn.params_mut();
        v.extend(self.gru.params_mut());
        v.extend(self.tfafn.params_mut());
        v
    }
}

/// Full mask decoder. With `stages` empty (the "w/o REMA" ablation) the
/// input goes straight from `proj` to the gate.
#[derive(Clone, Debug)]
pub struct RemaDecoder {
    pub proj: Linear,
    pub stages: Vec<RemaStage>,
    pub out: Option<Linear>,
    pub gate: Option<MaskGate>,
}

impl RemaDecoder {
    pub fn new(
        name: &str,
        input_dim: usize,
        freq_bins: usize,
        cfg: &RemaConfig,
        use_rema: bool,
        use_mask_gate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let gate = use_mask_gate.then(|| MaskGate::new(&format!("{name}.gate"), freq_bins, cfg.gate_kernel, rng));
        if !use_rema {
            return Ok(Self { proj: Linear::new(&format!("{name}.proj"), input_dim, freq_bins, rng), stages: Vec::new(), out: None, gate });
        }
        let proj = Linear::new(&format!("{name}.proj"), input_dim, d, rng);
        let stages = (0..cfg.repeats)
            .map(|i| RemaStage {
                safn: SaFnBlock::new(&format!("{name}.stage{i}.safn"), d, cfg.heads, d * cfg.ffn_expansion, rng),
                gru: BiGru::new(&format!("{name}.stage{i}.gru"), d, d / 2, rng),
                tfafn: TfaFnBlock::new(&format!("{name}.stage{i}.tfafn"), cfg, rng),
            })
            .collect();
        let out = Some(Linear::new(&format!("{name}.out"), d, freq_bins, rng));
        Ok(Self { proj, stages, out, gate })
    }

    pub fn input_dim(&self) -> usize {
        self.proj.in_dim()
    }

    /// Pre-gate output `Z_rema` as `[B, F, T]`.
    pub fn features<'t>(&self, tape: &'t Tape, z_cross: Var<'t>) -> Result<Var<'t>> {
        let s = z_cross.shape();
        if s.len() != 3 || s[1] != self.input_dim() {
            return Err(Error::config(format!("decoder expects {} input channels, got shape {s:?}", self.input_dim())));
        }
        let mut h = self.proj.forward(tape, z_cross.transpose(1, 2));
        for st in &self.stages {
            h = st.safn.forward(tape, h);
            h = st.gru.forward(tape, h);
            h = st.tfafn.forward(tape, h);
        }
        if let Some(out) = &self.out {
            h = out.forward(tape, h);
        }
        Ok(h.transpose(1, 2))
    }

    /// Mask `[B, F, T]` in (0, 1).
    pub fn forward<'t>(&self, tape: &'t Tape, z_cross: Var<'t>) -> Result<Var<'t>> {
        let z = self.features(tape, z_cross)?;
        match &self.gate {
            Some(g) => g.forward(tape, z),
            None => Ok(z.sigmoid()),
        }
    }
}

impl Module for RemaDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.proj.params();
        for s in &self.stages {
            v.extend(s.params());
        }
        if let Some(o) = &self.out {
            v.extend(o.params());
        }
        if let Some(g) = &self.gate {
            v.extend(g.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.proj.params_mut();
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        if let Some(o) = &mut self.out {
            v.extend(o.params_mut());
        }
        if let Some(g) = &mut self.gate {
            v.extend(g.params_mut());
        }
        v
    }
}

/// Applies [`lsigmoid`] elementwise along the frequency axis of a `[F, T]` array.
pub fn lsigmoid_plane(t: &Array, alpha: &[f64], beta: f64) -> Array {
    let mut out = t.clone();
    for (ix, v) in out.indexed_iter_mut() {
        *v = lsigmoid(*v, alpha[ix[0]], beta);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn small_cfg() -> RemaConfig {
        RemaConfig { model_dim: 8, heads: 2, ffn_expansion: 2, tfa_time_kernel: 3, tfa_hidden_channels: 4, tfa_reduction: 4, repeats: 1, gate_kernel: 1 }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn close(a: &Array, b: &Array, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn lsigmoid_examples() {
        assert!((lsigmoid(1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((lsigmoid(0.0, 1.0, 1.0) - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
        assert!(lsigmoid(1e6, 1.0, 1.0) > 0.999);
        assert!(lsigmoid(-1e6, 1.0, 1.0) >= 0.0 && lsigmoid(-1e6, 1.0, 1.0).is_finite());
        assert!((lsigmoid(3.0, 2.0, 0.5) - 0.5 / (1.0 + (1.0f64 - 6.0).exp())).abs() < 1e-15);
    }

    fn linear_ref(x: &[f64], l: &Linear) -> Vec<f64> {
        let (i, o) = (l.in_dim(), l.out_dim());
        (0..o).map(|c| l.bias.value[[c]] + (0..i).map(|k| x[k] * l.weight.value[[k, c]]).sum::<f64>()).collect()
    }

    fn conv1d_ref(x: &[Vec<f64>], c: &Conv1d) -> Vec<Vec<f64>> {
        let (cout, cin, k) = (c.weight.value.shape()[0], c.weight.value.shape()[1], c.weight.value.shape()[2]);
        let t = x[0].len();
        let p = (k / 2) as isize;
        (0..cout)
            .map(|o| {
                (0..t)
                    .map(|ti| {
                        let mut acc = c.bias.value[[o]];
                        for ci in 0..cin {
                            for ki in 0..k {
                                let src = ti as isize + ki as isize - p;
                                if src >= 0 && (src as usize) < t {
                                    acc += c.weight.value[[o, ci, ki]] * x[ci][src as usize];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Plain-loop TFA on one `[F, T]` item.
    fn tfa_ref(tfa: &Tfa, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (f, t) = (x.len(), x[0].len());
        let maxf: Vec<f64> = (0..t).map(|j| (0..f).map(|i| x[i][j]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let meanf: Vec<f64> = (0..t).map(|j| (0..f).map(|i| x[i][j]).sum::<f64>() / f as f64).collect();
        let h = conv1d_ref(&[maxf, meanf], &tfa.ta_conv1);
        let h: Vec<Vec<f64>> = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        let ta: Vec<f64> = conv1d_ref(&h, &tfa.ta_conv2)[0].iter().map(|&v| sig(v)).collect();
        let pooled: Vec<f64> = x
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) + row.iter().sum::<f64>() / t as f64)
            .collect();
        let hid: Vec<f64> = linear_ref(&pooled, &tfa.fa_fc1).into_iter().map(|v| v.max(0.0)).collect();
        let fa: Vec<f64> = linear_ref(&hid, &tfa.fa_fc2).into_iter().map(sig).collect();
        (0..f).map(|i| (0..t).map(|j| x[i][j] * fa[i] * ta[j]).collect()).collect()
    }

    fn to_rows(a: &Array, b: usize) -> Vec<Vec<f64>> {
        let (f, t) = (a.shape()[1], a.shape()[2]);
        (0..f).map(|i| (0..t).map(|j| a[[b, i, j]]).collect()).collect()
    }

    #[test]
    fn tfa_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = small_cfg();
        let tfa = Tfa::new("t", 8, &cfg, &mut rng);
        let x = uniform(&mut rng, &[2, 8, 5], 1.5);
        let tape = Tape::new();
        let y = tfa.forward(&tape, tape.constant(x.clone())).value();
        for b in 0..2 {
            let want = tfa_ref(&tfa, &to_rows(&x, b));
            for i in 0..8 {
                for j in 0..5 {
                    assert!((y[[b, i, j]] - want[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tfa_hand_expanded_tiny_case() {
        // 1x2x3 input, hidden widths 1, kernel 1, so every step is a scalar product.
        let cfg = RemaConfig { tfa_time_kernel: 1, tfa_hidden_channels: 1, tfa_reduction: 2, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tfa = Tfa::new("t", 2, &cfg, &mut rng);
        tfa.ta_conv1.weight.value = ndarray::array![[[0.5], [1.0]]].into_dyn();
        tfa.ta_conv1.bias.value = ndarray::array![0.0].into_dyn();
        tfa.ta_conv2.weight.value = ndarray::array![[[2.0]]].into_dyn();
        tfa.ta_conv2.bias.value = ndarray::array![-1.0].into_dyn();
        tfa.fa_fc1.weight.value = ndarray::array![[1.0], [-1.0]].into_dyn();
        tfa.fa_fc1.bias.value = ndarray::array![0.0].into_dyn();
        tfa.fa_fc2.weight.value = ndarray::array![[1.0, -1.0]].into_dyn();
        tfa.fa_fc2.bias.value = ndarray::array![0.0, 0.0].into_dyn();
        let x = ndarray::array![[[1.0, 2.0, 3.0], [3.0, 0.0, -1.0]]].into_dyn();
        // Per frame: max over F = [3,2,3], mean = [2,1,1]; conv1 = 0.5*max + mean = [3.5,2,2.5];
        // ta = sig(2*h - 1) = sig([6,3,4]).
        // Per bin: max+mean over T = [3+2, 3+2/3] = [5, 11/3]; fc1 = 5 - 11/3 = 4/3;
        // fa = sig([4/3, -4/3]).
        let ta = [sig(6.0), sig(3.0), sig(4.0)];
        let fa = [sig(4.0 / 3.0), sig(-4.0 / 3.0)];
        let tape = Tape::new();
        let y = tfa.forward(&tape, tape.constant(x.clone())).value();
        for i in 0..2 {
            for j in 0..3 {
                assert!((y[[0, i, j]] - x[[0, i, j]] * fa[i] * ta[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tfa_ratio_is_rank_one_and_constant_input_pools_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tfa = Tfa::new("t", 8, &small_cfg(), &mut rng);
        let x = uniform(&mut rng, &[1, 8, 6], 1.0).mapv(|v| v + 2.0);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (fa, ta) = tfa.weights(&tape, xv);
        let y = tfa.forward(&tape, xv).value();
        let (fa, ta) = (fa.value(), ta.value());
        for i in 0..8 {
            for j in 0..6 {
                assert!((y[[0, i, j]] / x[[0, i, j]] - fa[[0, i, 0]] * ta[[0, 0, j]]).abs() < 1e-12);
            }
        }
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[1, 4, 5]), 0.7));
        close(&c.max_axis(1, true).value(), &c.mean_axis(1, true).value(), 1e-15);
    }

    #[test]
    fn tfafn_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut blk = TfaFnBlock::new("b", &small_cfg(), &mut rng);
        for p in blk.tfa.params_mut().into_iter().chain(blk.ffn.params_mut()) {
            p.value.fill(0.0);
        }
        let x = uniform(&mut rng, &[1, 4, 8], 1.0);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let y = blk.forward(&tape, xv).value();
        // Zero TFA weights still give sigmoid(0)^2 = 1/4 scaling on the residual branch.
        let want = blk.norm2.forward(&tape, blk.norm1.forward(&tape, xv.scale(1.25))).value();
        close(&y, &want, 1e-12);
        let z = blk.forward(&tape, tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 8])))).value();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    fn attention_ref(mha: &MhaView, x: &Array) -> Array {
        let (t, d) = (x.shape()[1], x.shape()[2]);
        let h = mha.heads;
        let dh = d / h;
        let rows: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|c| x[[0, i, c]]).collect()).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| linear_ref(r, mha.q)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| linear_ref(r, mha.k)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| linear_ref(r, mha.v)).collect();
        let mut ctx = vec![vec![0.0; d]; t];
        for hh in 0..h {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| q[i][hh * dh + c] * k[j][hh * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    for c in 0..dh {
                        ctx[i][hh * dh + c] += e[j] / z * v[j][hh * dh + c];
                    }
                }
            }
        }
        let mut out = ArrayD::zeros(IxDyn(&[1, t, d]));
        for i in 0..t {
            for (c, val) in linear_ref(&ctx[i], mha.o).into_iter().enumerate() {
                out[[0, i, c]] = val;
            }
        }
        out
    }

    struct MhaView<'a> {
        q: &'a Linear,
        k: &'a Linear,
        v: &'a Linear,
        o: &'a Linear,
        heads: usize,
    }

    #[test]
    fn attention_matches_naive_oracle_and_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let blk = SaFnBlock::new("s", 8, 2, 16, &mut rng);
        let a = &blk.attention;
        let view = MhaView { q: &a.query, k: &a.key, v: &a.value, o: &a.out, heads: a.heads };
        let x = uniform(&mut rng, &[1, 5, 8], 1.0);
        let tape = Tape::new();
        let got = a.forward(&tape, tape.constant(x.clone())).value();
        close(&got, &attention_ref(&view, &x), 1e-10);

        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                xp[[0, dst, c]] = x[[0, src, c]];
            }
        }
        let y = blk.forward(&tape, tape.constant(x)).value();
        let yp = blk.forward(&tape, tape.constant(xp)).value();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[[0, dst, c]] - y[[0, src, c]]).abs() < 1e-10);
            }
        }
        let one = blk.forward(&tape, tape.constant(uniform(&mut rng, &[1, 1, 8], 1.0))).value();
        assert!(one.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bigru_sees_future_frames_and_zero_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut gru = BiGru::new("g", 4, 3, &mut rng);
        let x = uniform(&mut rng, &[1, 5, 4], 1.0);
        let mut x2 = x.clone();
        x2[[0, 3, 0]] += 0.5;
        let tape = Tape::new();
        let y = gru.forward(&tape, tape.constant(x)).value();
        let y2 = gru.forward(&tape, tape.constant(x2)).value();
        assert!((0..6).any(|c| (y[[0, 2, c]] - y2[[0, 2, c]]).abs() > 1e-6));
        for p in gru.params_mut() {
            if p.name.contains(".b_") {
                p.value.fill(0.0);
            }
        }
        let z = gru.forward(&tape, tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 4])))).value();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = MaskGate::new("m", 3, 1, &mut rng);
        let tape = Tape::new();
        let x = uniform(&mut rng, &[2, 3, 4], 5.0);
        let y = g.forward(&tape, tape.constant(x.clone())).unwrap().value();
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        // composed oracle
        for b in 0..2 {
            let relu: Vec<Vec<f64>> = to_rows(&x, b).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
            let c = conv1d_ref(&relu, &g.conv);
            for i in 0..3 {
                for j in 0..4 {
                    assert!((y[[b, i, j]] - lsigmoid(c[i][j], g.alpha.value[[i]], 1.0)).abs() < 1e-12);
                }
            }
        }
        g.conv.weight.value = ndarray::Array3::from_shape_fn((3, 3, 1), |(o, i, _)| if o == i { 1.0 } else { 0.0 }).into_dyn();
        g.conv.bias.value.fill(0.0);
        let half = g.forward(&tape, tape.constant(ArrayD::from_elem(IxDyn(&[1, 3, 2]), 1.0))).unwrap().value();
        assert!(half.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(matches!(g.forward(&tape, tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 2])))), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(RemaConfig::default().validate().is_ok());
        assert!(RemaConfig { heads: 3, ..RemaConfig::default() }.validate().is_err());
        assert!(RemaConfig { tfa_time_kernel: 4, ..RemaConfig::default() }.validate().is_err());
    }

    #[test]
    fn decoder_shape_range_and_alpha_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dec = RemaDecoder::new("rema.mag", 6, 5, &small_cfg(), true, true, &mut rng).unwrap();
        let x = uniform(&mut rng, &[1, 6, 4], 1.0);
        let loss_of = |d: &RemaDecoder| {
            let tape = Tape::new();
            let m = d.forward(&tape, tape.constant(x.clone())).unwrap();
            let v = m.value();
            assert_eq!(v.shape(), &[1, 5, 4]);
            assert!(v.iter().all(|&u| u > 0.0 && u < 1.0));
            let l = m.square().sum_all();
            (l.value()[[]], tape.backward(l).into_named())
        };
        let (_, grads) = loss_of(&dec);
        let g = &grads["rema.mag.gate.alpha"];
        for i in 0..5 {
            let h = 1e-6;
            let mut p = dec.clone();
            let mut m = dec.clone();
            p.gate.as_mut().unwrap().alpha.value[[i]] += h;
            m.gate.as_mut().unwrap().alpha.value[[i]] -= h;
            let fd = (loss_of(&p).0 - loss_of(&m).0) / (2.0 * h);
            let rel = (fd - g[[i]]).abs() / fd.abs().max(g[[i]].abs()).max(1e-8);
            assert!(rel < 1e-4, "alpha[{i}]: fd {fd} vs {}", g[[i]]);
        }
        for name in ["rema.mag.proj.weight", "rema.mag.stage0.gru.fwd.w_hh", "rema.mag.stage0.tfafn.tfa.ta1.weight"] {
            let g = &grads[name];
            let h = 1e-6;
            let mut p = dec.clone();
            let mut m = dec.clone();
            for (d, s) in [(&mut p, h), (&mut m, -h)] {
                let prm = d.params_mut().into_iter().find(|q| q.name == name).unwrap();
                prm.value.as_slice_mut().unwrap()[1] += s;
            }
            let fd = (loss_of(&p).0 - loss_of(&m).0) / (2.0 * h);
            let an = g.as_slice().unwrap()[1];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4, "{name}: {fd} vs {an}");
        }
        let tape = Tape::new();
        assert!(matches!(dec.forward(&tape, tape.constant(ArrayD::zeros(IxDyn(&[1, 7, 4])))), Err(Error::Config(_))));
    }

    #[test]
    fn ablated_decoder_drops_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let full = RemaDecoder::new("r", 6, 5, &small_cfg(), true, true, &mut rng).unwrap();
        let no_rema = RemaDecoder::new("r", 6, 5, &small_cfg(), false, true, &mut rng).unwrap();
        let no_gate = RemaDecoder::new("r", 6, 5, &small_cfg(), true, false, &mut rng).unwrap();
        assert_eq!(no_rema.trainable_count(), 6 * 5 + 5 + full.gate.as_ref().unwrap().trainable_count());
        assert_eq!(full.trainable_count() - no_gate.trainable_count(), 5 * 5 + 5 + 5);
        let tape = Tape::new();
        let m = no_gate.forward(&tape, tape.constant(ArrayD::zeros(IxDyn(&[1, 6, 3])))).unwrap().value();
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
