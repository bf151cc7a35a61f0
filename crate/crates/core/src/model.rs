//! The dual-path network: compressed (and PCS-boosted) spectra feed an
//! MP-2DC encoder and, in parallel, gated SSL embeddings; the fused features
//! drive one mask decoder per path and the masked spectra are resynthesised.

use std::path::PathBuf;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Param, Tape, Var};
use crate::decoder::{RemaConfig, RemaDecoder};
use crate::dsp::{
    self, apply_pcs, compress_magnitude, decompress_magnitude, default_band_table, load_band_table, make_bif_gains,
    wrap_phase, BifGains, SpectroPair, StftConfig, Waveform,
};
use crate::encoder::Mp2dc;
use crate::nn::{ForwardCtx, Module};
use crate::ssl::{align_time, FsSslPath, SslBackbone, SslConfig, StandInBackbone};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskDomain {
    /// Masks multiply the PCS-boosted compressed magnitude.
    #[default]
    Boosted,
    /// Masks multiply the compressed magnitude before boosting.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// `mask * phase`.
    #[default]
    Multiply,
    /// `phase + pi * (2 * mask - 1)`, wrapped.
    Residual,
}

/// Module switches. Every `false` removes the module's parameters and its
/// compute from the forward graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_pcs: bool,
    pub use_fs_ssl: bool,
    pub use_mp2dc: bool,
    pub use_rema: bool,
    pub use_mask_gate: bool,
    pub enhance_mag: bool,
    pub enhance_pha: bool,
    pub partial_finetune: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_pcs: true,
            use_fs_ssl: true,
            use_mp2dc: true,
            use_rema: true,
            use_mask_gate: true,
            enhance_mag: true,
            enhance_pha: true,
            partial_finetune: true,
        }
    }
}

impl AblationFlags {
    /// The "w/o" rows of the ablation table, by name.
    pub fn table_rows() -> Vec<(&'static str, AblationFlags)> {
        let full = AblationFlags::default();
        vec![
            ("full", full.clone()),
            ("w/o PCS", AblationFlags { use_pcs: false, ..full.clone() }),
            ("w/o FS-SSL", AblationFlags { use_fs_ssl: false, ..full.clone() }),
            ("w/o PF", AblationFlags { partial_finetune: false, ..full.clone() }),
            ("w/o MP-2DC", AblationFlags { use_mp2dc: false, ..full.clone() }),
            ("w/o REMA", AblationFlags { use_rema: false, ..full.clone() }),
            ("w/o Mask Gate", AblationFlags { use_mask_gate: false, ..full.clone() }),
            ("w/o Mag", AblationFlags { enhance_mag: false, ..full.clone() }),
            ("w/o Pha", AblationFlags { enhance_pha: false, ..full }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PcsConfig {
    /// Band table file (`low_hz high_hz gain` per line); the bundled table when absent.
    pub band_table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BspMpnetConfig {
    pub seed: u64,
    pub mp2dc_channels: usize,
    pub mask_domain: MaskDomain,
    pub phase_mode: PhaseMode,
    pub stft: StftConfig,
    pub pcs: PcsConfig,
    pub ssl: SslConfig,
    pub rema_mag: RemaConfig,
    pub rema_pha: RemaConfig,
    pub ablation: AblationFlags,
}

impl Default for BspMpnetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mp2dc_channels: 16,
            mask_domain: MaskDomain::default(),
            phase_mode: PhaseMode::default(),
            stft: StftConfig::default(),
            pcs: PcsConfig::default(),
            ssl: SslConfig::default(),
            rema_mag: RemaConfig::default(),
            rema_pha: RemaConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl BspMpnetConfig {
    /// A small configuration that trains quickly on a CPU.
    pub fn tiny() -> Self {
        let rema = RemaConfig { model_dim: 32, heads: 4, ffn_expansion: 2, ..RemaConfig::default() };
        Self { rema_mag: rema.clone(), rema_pha: rema, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.ssl.validate()?;
        self.rema_mag.validate()?;
        self.rema_pha.validate()?;
        if !self.ablation.enhance_mag && !self.ablation.enhance_pha {
            return Err(Error::config("at least one of enhance_mag and enhance_pha must be enabled"));
        }
        if self.ablation.use_mp2dc && self.mp2dc_channels == 0 {
            return Err(Error::config("mp2dc_channels must be positive"));
        }
        Ok(())
    }

    pub fn bif_gains(&self) -> Result<BifGains> {
        let bands = match &self.pcs.band_table {
            Some(p) => load_band_table(p)?,
            None => default_band_table(),
        };
        make_bif_gains(&self.stft, &bands)
    }
}

/// Spectral view of a batch of equal-length waveforms, `[B, F, T]` planes.
#[derive(Clone, Debug)]
pub struct SpectralBatch {
    pub waves: Array,
    pub length: usize,
    pub cmag: Array3<f64>,
    pub boosted: Array3<f64>,
    pub phase: Array3<f64>,
}

impl SpectralBatch {
    pub fn batch(&self) -> usize {
        self.cmag.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.cmag.shape()[2]
    }

    /// The plane masks multiply for the given domain.
    pub fn mask_base(&self, domain: MaskDomain) -> &Array3<f64> {
        match domain {
            MaskDomain::Boosted => &self.boosted,
            MaskDomain::Raw => &self.cmag,
        }
    }
}

/// Masked spectra in the compressed domain, `[B, F, T]`.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput<'t> {
    pub magnitude: Var<'t>,
    pub phase: Var<'t>,
    pub mag_mask: Option<Var<'t>>,
    pub pha_mask: Option<Var<'t>>,
}

/// Result of enhancing one waveform.
#[derive(Clone, Debug)]
pub struct Enhanced {
    /// Output magnitude in the compressed (mask) domain.
    pub magnitude: Array2<f64>,
    /// Output phase wrapped to `(-pi, pi]`.
    pub phase: Array2<f64>,
    pub wave: Waveform,
}

/// Per-path modules; `None` when the path or the module is ablated.
#[derive(Clone, Debug, Default)]
pub struct PathModules {
    pub mp2dc: Option<Mp2dc>,
    pub fs_ssl: Option<FsSslPath>,
    pub rema: Option<RemaDecoder>,
}

impl PathModules {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let Some(m) = &self.mp2dc {
            v.extend(m.params());
        }
        if let Some(m) = &self.fs_ssl {
            v.extend(m.params());
        }
        if let Some(m) = &self.rema {
            v.extend(m.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(m) = &mut self.mp2dc {
            v.extend(m.params_mut());
        }
        if let Some(m) = &mut self.fs_ssl {
            v.extend(m.params_mut());
        }
        if let Some(m) = &mut self.rema {
            v.extend(m.params_mut());
        }
        v
    }
}

pub struct BspMpnet {
    pub config: BspMpnetConfig,
    pub gains: Param,
    pub backbone: Option<Box<dyn SslBackbone>>,
    pub mag: PathModules,
    pub pha: PathModules,
}

impl std::fmt::Debug for BspMpnet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BspMpnet")
            .field("config", &self.config)
            .field("trainable", &self.trainable_count())
            .finish_non_exhaustive()
    }
}

/// Independent RNG stream per component so that removing one module leaves
/// the initialisation of the others unchanged.
fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl BspMpnet {
    /// Builds the model with the stand-in SSL backbone.
    pub fn new(config: BspMpnetConfig) -> Result<Self> {
        config.validate()?;
        let backbone: Option<Box<dyn SslBackbone>> = config
            .ablation
            .use_fs_ssl
            .then(|| Box::new(StandInBackbone::new(&config.ssl, config.seed ^ 0x55aa)) as Box<dyn SslBackbone>);
        Self::with_backbone(config, backbone)
    }

    /// Builds the model around a caller-supplied backbone (ignored when FS-SSL is ablated).
    pub fn with_backbone(config: BspMpnetConfig, backbone: Option<Box<dyn SslBackbone>>) -> Result<Self> {
        config.validate()?;
        let flags = &config.ablation;
        let bins = config.stft.freq_bins();
        let gains = if flags.use_pcs { config.bif_gains()? } else { BifGains::unit(bins) };
        let gains = Param::frozen("pcs.gains", ArrayD::from_shape_vec(IxDyn(&[bins]), gains.as_slice().to_vec()).unwrap());

        let mut backbone = if flags.use_fs_ssl {
            Some(backbone.ok_or_else(|| Error::config("FS-SSL is enabled but no backbone was supplied"))?)
        } else {
            None
        };
        let ssl_dim = match &mut backbone {
            Some(bb) => {
                let mask: Vec<bool> = if flags.partial_finetune {
                    let top = config.ssl.trainable_top_layers.min(bb.layer_count());
                    (0..bb.layer_count()).map(|i| i >= bb.layer_count() - top).collect()
                } else {
                    vec![false; bb.layer_count()]
                };
                bb.set_trainability_mask(&mask)?;
                bb.hidden_dim()
            }
            None => 0,
        };

        let build = |tag: &str, enabled: bool, rema_cfg: &RemaConfig, stream: u64| -> Result<PathModules> {
            if !enabled {
                return Ok(PathModules::default());
            }
            let mp2dc = flags
                .use_mp2dc
                .then(|| Mp2dc::new(&format!("mp2dc.{tag}"), config.mp2dc_channels, &mut component_rng(config.seed, stream)));
            let fs_ssl = backbone.as_ref().map(|bb| {
                FsSslPath::new(
                    &format!("fs_ssl.{tag}"),
                    bb.layer_count(),
                    bb.hidden_dim(),
                    config.ssl.mpfs_reduction,
                    &mut component_rng(config.seed, stream + 1),
                )
            });
            let rema = RemaDecoder::new(
                &format!("rema.{tag}"),
                ssl_dim + bins,
                bins,
                rema_cfg,
                flags.use_rema,
                flags.use_mask_gate,
                &mut component_rng(config.seed, stream + 2),
            )?;
            Ok(PathModules { mp2dc, fs_ssl, rema: Some(rema) })
        };
        let mag = build("mag", flags.enhance_mag, &config.rema_mag, 10)?;
        let pha = build("pha", flags.enhance_pha, &config.rema_pha, 20)?;
        Ok(Self { config, gains, backbone, mag, pha })
    }

    pub fn bif_gains(&self) -> BifGains {
        BifGains::from_vec(self.gains.value.iter().copied().collect()).expect("validated gains")
    }

    /// Every named array saved in a checkpoint: parameters, then buffers.
    pub fn state(&self) -> Vec<&Param> {
        let mut v = self.params();
        v.extend(self.buffers());
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param> {
        let Self { gains, backbone, mag, pha, .. } = self;
        let mut v = Vec::new();
        if let Some(bb) = backbone {
            v.extend(bb.params_mut());
        }
        let mut bufs = vec![gains];
        for PathModules { mp2dc, fs_ssl, rema } in [mag, pha] {
            if let Some(m) = mp2dc {
                v.extend(m.up.params_mut());
                v.push(&mut m.norm.gamma);
                v.push(&mut m.norm.beta);
                v.extend(m.act.params_mut());
                v.extend(m.down.params_mut());
                bufs.push(&mut m.norm.running_mean);
                bufs.push(&mut m.norm.running_var);
            }
            if let Some(f) = fs_ssl {
                v.extend(f.params_mut());
            }
            if let Some(r) = rema {
                v.extend(r.params_mut());
            }
        }
        v.extend(bufs);
        v
    }

    /// STFT, compression and PCS for a batch of equal-length waveforms.
    pub fn analyze(&self, waves: &[Waveform]) -> Result<SpectralBatch> {
        let first = waves.first().ok_or_else(|| Error::input("empty batch"))?;
        let length = first.len();
        if waves.iter().any(|w| w.len() != length) {
            return Err(Error::input("all waveforms in a batch must have the same length"));
        }
        let cfg = &self.config.stft;
        let frames = cfg.frames(length);
        let bins = cfg.freq_bins();
        let b = waves.len();
        let mut cmag = Array3::zeros((b, bins, frames));
        let mut boosted = Array3::zeros((b, bins, frames));
        let mut phase = Array3::zeros((b, bins, frames));
        let gains = self.bif_gains();
        for (i, w) in waves.iter().enumerate() {
            let spec = dsp::stft(w, cfg)?;
            let c = compress_magnitude(&spec.magnitude)?;
            boosted.index_axis_mut(Axis(0), i).assign(&apply_pcs(&c, &gains)?);
            cmag.index_axis_mut(Axis(0), i).assign(&c);
            phase.index_axis_mut(Axis(0), i).assign(&spec.phase);
        }
        let mut flat = Vec::with_capacity(b * length);
        for w in waves {
            flat.extend_from_slice(&w.samples);
        }
        let waves = ArrayD::from_shape_vec(IxDyn(&[b, length]), flat).unwrap();
        Ok(SpectralBatch { waves, length, cmag, boosted, phase })
    }

    fn path_mask<'t>(
        &self,
        tape: &'t Tape,
        modules: &PathModules,
        plane: Var<'t>,
        ssl: Option<&crate::ssl::LayerStack<'t>>,
        frames: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var<'t>> {
        let latent = match &modules.mp2dc {
            Some(m) => m.forward(tape, plane, ctx)?,
            None => plane,
        };
        let fused = match (&modules.fs_ssl, ssl) {
            (Some(path), Some(stack)) => {
                let feats = align_time(tape, path.forward(tape, stack)?, frames)?;
                tape.concat(&[latent, feats.transpose(1, 2)], 1)
            }
            _ => latent,
        };
        modules.rema.as_ref().expect("enabled path has a decoder").forward(tape, fused)
    }

    /// Differentiable forward pass over a prepared batch.
    pub fn forward<'t>(&self, tape: &'t Tape, input: &SpectralBatch, ctx: &mut ForwardCtx) -> Result<ModelOutput<'t>> {
        let flags = &self.config.ablation;
        let frames = input.frames();
        let base = tape.constant(input.mask_base(self.config.mask_domain).clone().into_dyn());
        let boosted = tape.constant(input.boosted.clone().into_dyn());
        let phase = tape.constant(input.phase.clone().into_dyn());
        let stack = match &self.backbone {
            Some(bb) => Some(bb.forward(tape, &input.waves)?),
            None => None,
        };

        let (magnitude, mag_mask) = if flags.enhance_mag {
            let m = self.path_mask(tape, &self.mag, boosted, stack.as_ref(), frames, ctx)?;
            (m * base, Some(m))
        } else {
            (base, None)
        };
        let (phase_out, pha_mask) = if flags.enhance_pha {
            let m = self.path_mask(tape, &self.pha, phase, stack.as_ref(), frames, ctx)?;
            let p = match self.config.phase_mode {
                PhaseMode::Multiply => m * phase,
                PhaseMode::Residual => phase + m.scale(2.0 * std::f64::consts::PI).offset(-std::f64::consts::PI),
            };
            (p, Some(m))
        } else {
            (phase, None)
        };
        Ok(ModelOutput { magnitude, phase: phase_out, mag_mask, pha_mask })
    }

    /// Enhance a single waveform in evaluation mode.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Enhanced> {
        if noisy.sample_rate != self.config.stft.sample_rate {
            return Err(Error::config(format!(
                "input sample rate {} Hz, model expects {} Hz",
                noisy.sample_rate, self.config.stft.sample_rate
            )));
        }
        let input = self.analyze(std::slice::from_ref(noisy))?;
        let tape = Tape::new();
        let out = self.forward(&tape, &input, &mut ForwardCtx::eval())?;
        let to2 = |v: &Array| v.index_axis(Axis(0), 0).to_owned().into_dimensionality::<ndarray::Ix2>().unwrap();
        let magnitude = to2(&out.magnitude.value());
        let mut phase = to2(&out.phase.value());
        if self.config.phase_mode == PhaseMode::Residual {
            phase.mapv_inplace(wrap_phase);
        }
        let wave = reconstruct(&decompress_magnitude(&magnitude), &phase, &self.config.stft, noisy.len())?;
        Ok(Enhanced { magnitude, phase, wave })
    }

    /// Normalised `(magnitude, phase)` layer weights, when FS-SSL is enabled.
    pub fn layer_weights(&self) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        (
            self.mag.fs_ssl.as_ref().map(|p| p.weights.normalized()),
            self.pha.fs_ssl.as_ref().map(|p| p.weights.normalized()),
        )
    }

    /// Commit batch-norm running statistics gathered in a training forward pass.
    pub fn apply_updates(&mut self, ctx: ForwardCtx) -> Result<()> {
        let mut buffers = self.buffers_mut();
        for (name, value) in ctx.updates {
            let buf = buffers
                .iter_mut()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::config(format!("unknown buffer {name}")))?;
            buf.value = value;
        }
        Ok(())
    }
}

impl Module for BspMpnet {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let Some(bb) = &self.backbone {
            v.extend(bb.params());
        }
        v.extend(self.mag.params());
        v.extend(self.pha.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(bb) = &mut self.backbone {
            v.extend(bb.params_mut());
        }
        v.extend(self.mag.params_mut());
        v.extend(self.pha.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Param> {
        let mut v = vec![&self.gains];
        for m in [&self.mag.mp2dc, &self.pha.mp2dc].into_iter().flatten() {
            v.extend(m.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.gains];
        for m in [&mut self.mag.mp2dc, &mut self.pha.mp2dc].into_iter().flatten() {
            v.extend(m.buffers_mut());
        }
        v
    }
}

/// ISTFT of `magnitude * exp(i * phase)` (linear magnitude) to `length` samples.
pub fn reconstruct(magnitude: &Array2<f64>, phase: &Array2<f64>, cfg: &StftConfig, length: usize) -> Result<Waveform> {
    let spec = SpectroPair::new(magnitude.clone(), phase.clone(), cfg.clone())?;
    dsp::istft(&spec, length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    pub(crate) fn test_config() -> BspMpnetConfig {
        let stft = StftConfig { fft_size: 32, win_length: 32, hop_length: 8, ..StftConfig::default() };
        let ssl = SslConfig { frame_stride: 16, ..SslConfig::default() };
        let rema = RemaConfig { model_dim: 8, heads: 2, ffn_expansion: 2, tfa_time_kernel: 3, ..RemaConfig::default() };
        BspMpnetConfig { stft, ssl, rema_mag: rema.clone(), rema_pha: rema, mp2dc_channels: 4, ..BspMpnetConfig::default() }
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(uniform(&mut rng, &[len], 0.5).into_raw_vec_and_offset().0, 16000)
    }

    #[test]
    fn output_length_matches_input() {
        let model = BspMpnet::new(BspMpnetConfig::tiny()).unwrap();
        for secs in [0.5, 1.0] {
            let w = noise((secs * 16000.0) as usize, 1);
            let e = model.enhance(&w).unwrap();
            assert_eq!(e.wave.len(), w.len());
            assert_eq!(e.magnitude.dim(), (257, w.len() / 100 + 1));
        }
    }

    #[test]
    fn phase_bypass_is_bitwise() {
        let cfg = BspMpnetConfig { ablation: AblationFlags { enhance_pha: false, ..AblationFlags::default() }, ..test_config() };
        let model = BspMpnet::new(cfg).unwrap();
        let w = noise(200, 2);
        let e = model.enhance(&w).unwrap();
        let spec = dsp::stft(&w, &model.config.stft).unwrap();
        assert_eq!(e.phase, spec.phase);
    }

    #[test]
    fn rejects_both_paths_disabled() {
        let cfg = BspMpnetConfig {
            ablation: AblationFlags { enhance_pha: false, enhance_mag: false, ..AblationFlags::default() },
            ..test_config()
        };
        assert!(matches!(BspMpnet::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let w = noise(300, 3);
        let a = BspMpnet::new(test_config()).unwrap().enhance(&w).unwrap();
        let b = BspMpnet::new(test_config()).unwrap().enhance(&w).unwrap();
        assert_eq!(a.wave, b.wave);
    }

    #[test]
    fn masks_preserve_sign() {
        let model = BspMpnet::new(test_config()).unwrap();
        let w = noise(300, 4);
        let input = model.analyze(std::slice::from_ref(&w)).unwrap();
        let e = model.enhance(&w).unwrap();
        for (o, i) in e.phase.iter().zip(input.phase.iter()) {
            assert!(o.signum() == i.signum() || *o == 0.0);
            assert!(o.abs() <= i.abs());
        }
        assert!(e.magnitude.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn reconstruct_examples() {
        let cfg = StftConfig::default();
        let w = noise(4000, 5);
        let spec = dsp::stft(&w, &cfg).unwrap();
        let back = reconstruct(&spec.magnitude, &spec.phase, &cfg, w.len()).unwrap();
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let silent = reconstruct(&(&spec.magnitude * 0.0), &spec.phase, &cfg, w.len()).unwrap();
        assert!(silent.samples.iter().all(|&x| x == 0.0));
        let doubled = reconstruct(&(&spec.magnitude * 2.0), &spec.phase, &cfg, w.len()).unwrap();
        for (a, b) in doubled.samples.iter().zip(&back.samples) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
        assert!(matches!(
            reconstruct(&spec.magnitude, &spec.phase.slice(ndarray::s![..5, ..]).to_owned(), &cfg, 10),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn residual_phase_mode_wraps() {
        let cfg = BspMpnetConfig { phase_mode: PhaseMode::Residual, ..test_config() };
        let e = BspMpnet::new(cfg).unwrap().enhance(&noise(200, 6)).unwrap();
        assert!(e.phase.iter().all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI));
    }

    #[test]
    fn batchnorm_updates_commit() {
        let mut model = BspMpnet::new(test_config()).unwrap();
        let input = model.analyze(&[noise(200, 7), noise(200, 8)]).unwrap();
        let tape = Tape::new();
        let mut ctx = ForwardCtx::train();
        model.forward(&tape, &input, &mut ctx).unwrap();
        assert_eq!(ctx.updates.len(), 4);
        let before = model.buffers().iter().find(|b| b.name == "mp2dc.mag.norm.running_mean").unwrap().value.clone();
        model.apply_updates(ctx).unwrap();
        let after = &model.buffers().into_iter().find(|b| b.name == "mp2dc.mag.norm.running_mean").unwrap().value;
        assert_ne!(&before, after);
    }
}
