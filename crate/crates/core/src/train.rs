//! Optimisation loop: Adam with warmup and step decay, global-norm gradient
//! clipping, epoch management and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Param, Tape};
use crate::checkpoint::{Checkpoint, OptimizerState, TrainingMeta};
use crate::data::{crop_or_pad, load_pair, segment_offset, ManifestEntry};
use crate::dsp::Waveform;
use crate::loss::{model_loss, LossConfig, LossParts, Targets};
use crate::metrics::si_snr;
use crate::model::{BspMpnet, SpectralBatch};
use crate::nn::{ForwardCtx, Module};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    /// Steps between decays; `0` decays once per epoch.
    pub decay_interval: u64,
    /// Global L2 gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Random crop length for training examples; `None` zero-pads each batch
    /// to its longest utterance.
    pub segment_seconds: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            base_lr: 5e-4,
            warmup_steps: 500,
            decay: 0.98,
            decay_interval: 0,
            grad_clip: 5.0,
            seed: 0,
            segment_seconds: Some(2.0),
            max_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("train.base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("train.decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be non-negative"));
        }
        if matches!(self.segment_seconds, Some(s) if !(s > 0.0)) {
            return Err(Error::config("train.segment_seconds must be positive"));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{n} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Learning rate for a zero-based `step`: linear warmup reaching the base
/// rate at `step == warmup`, then one decay factor per elapsed interval.
pub fn lr_schedule(step: u64, cfg: &TrainConfig, steps_per_epoch: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let interval = if cfg.decay_interval == 0 { steps_per_epoch.max(1) } else { cfg.decay_interval };
    cfg.base_lr * cfg.decay.powi(((step - cfg.warmup_steps) / interval) as i32)
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, state: OptimizerState::default() }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<String, Array>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for p in params.into_iter().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            let m = self.state.m.entry(p.name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.state.v.entry(p.name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (&self.state.m[&p.name], &self.state.v[&p.name]);
            ndarray::Zip::from(&mut p.value).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Utterance pairs held in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub clean: Vec<Waveform>,
    pub noisy: Vec<Waveform>,
}

impl TrainData {
    pub fn load(entries: &[ManifestEntry], sample_rate: u32) -> Result<Self> {
        let mut d = Self::default();
        for e in entries {
            let (c, n) = load_pair(e, sample_rate)?;
            d.push(e.id.clone(), c, n);
        }
        Ok(d)
    }

    pub fn push(&mut self, id: String, clean: Waveform, noisy: Waveform) {
        self.ids.push(id);
        self.clean.push(clean);
        self.noisy.push(noisy);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Noisy input and clean targets for a batch of equal-length waveforms.
pub fn prepare_batch(model: &BspMpnet, noisy: &[Waveform], clean: &[Waveform], loss: &LossConfig) -> Result<(SpectralBatch, Targets)> {
    let input = model.analyze(noisy)?;
    let reference = model.analyze(clean)?;
    let magnitude = if loss.pcs_targets { reference.boosted } else { reference.cmag };
    Ok((input, Targets { magnitude: magnitude.into_dyn(), phase: reference.phase.into_dyn() }))
}

/// Loss of the current model on a batch, without updating anything.
pub fn evaluate_loss(model: &BspMpnet, input: &SpectralBatch, targets: &Targets, loss: &LossConfig) -> Result<(f64, LossParts)> {
    let tape = Tape::new();
    let out = model.forward(&tape, input, &mut ForwardCtx::train())?;
    let (total, parts) = model_loss(&tape, &out, targets, loss)?;
    let v = total.value()[[]];
    Ok((v, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub magnitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub batch_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub valid_si_snr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOSS_LOG: &str = "loss_log.csv";

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Mean SI-SNR of enhanced versus clean over a dataset.
pub fn validation_si_snr(model: &BspMpnet, data: &TrainData) -> Result<f64> {
    let mut total = 0.0;
    for (noisy, clean) in data.noisy.iter().zip(&data.clean) {
        total += si_snr(clean, &model.enhance(noisy)?.wave)?;
    }
    Ok(total / data.len() as f64)
}

/// Checks that every normalised layer-weight vector lies on the simplex.
pub fn check_simplex(model: &BspMpnet) -> Result<()> {
    let (w, p) = model.layer_weights();
    for (name, v) in [("magnitude", w), ("phase", p)] {
        let Some(v) = v else { continue };
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Training { step: None, message: format!("{name} layer weights left the simplex: {v:?}") });
        }
    }
    Ok(())
}

pub struct Trainer {
    pub model: BspMpnet,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub optimizer: Adam,
    pub meta: TrainingMeta,
}

impl Trainer {
    pub fn new(model: BspMpnet, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.weights().validate()?;
        let optimizer = Adam::new(&config);
        let meta = TrainingMeta { seed: config.seed, rng_word_pos: "0".into(), loss: Some(loss.clone()), ..TrainingMeta::default() };
        Ok(Self { model, config, loss, optimizer, meta })
    }

    /// Restores model, optimizer and data-order state from a checkpoint.
    pub fn resume(checkpoint: &Checkpoint, model: BspMpnet, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        let mut model = model;
        checkpoint.load_into(&mut model)?;
        let mut t = Self::new(model, config, loss)?;
        if checkpoint.meta.seed != t.config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, config has seed {}",
                checkpoint.meta.seed, t.config.seed
            )));
        }
        t.optimizer.state = checkpoint.optimizer.clone().unwrap_or_default();
        t.meta = checkpoint.meta.clone();
        t.meta.loss = Some(t.loss.clone());
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.optimizer.state.clone()), self.meta.clone())
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    fn finished(&self, n: usize) -> bool {
        self.meta.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.meta.step >= m) || n == 0
    }

    fn gather(&self, data: &TrainData, idx: &[usize], rng: &mut ChaCha8Rng) -> (Vec<Waveform>, Vec<Waveform>) {
        let target = match self.config.segment_seconds {
            Some(s) => (s * self.model.config.stft.sample_rate as f64).round() as usize,
            None => idx.iter().map(|&i| data.clean[i].len()).max().unwrap_or(0),
        };
        let mut noisy = Vec::with_capacity(idx.len());
        let mut clean = Vec::with_capacity(idx.len());
        for &i in idx {
            let off = match self.config.segment_seconds {
                Some(_) => segment_offset(data.clean[i].len(), target, rng).unwrap_or(0),
                None => 0,
            };
            noisy.push(crop_or_pad(&data.noisy[i], off, target));
            clean.push(crop_or_pad(&data.clean[i], off, target));
        }
        (noisy, clean)
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, noisy: &[Waveform], clean: &[Waveform], lr: f64, ids: &[String]) -> Result<StepLog> {
        let step = self.meta.step;
        let abort = |message: String| Error::Training { step: Some(step), message };
        let (input, targets) = prepare_batch(&self.model, noisy, clean, &self.loss)?;
        let (total, parts, mut grads, ctx) = {
            let tape = Tape::new();
            let mut ctx = ForwardCtx::train();
            let out = self.model.forward(&tape, &input, &mut ctx)?;
            let (loss, parts) = model_loss(&tape, &out, &targets, &self.loss).map_err(|e| match e {
                Error::Training { message, .. } => abort(format!("{message}; batch {ids:?}")),
                other => other,
            })?;
            let total = loss.value()[[]];
            (total, parts, tape.backward(loss).into_named(), ctx)
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(abort(format!("non-finite gradient norm; loss parts {parts:?}; batch {ids:?}")));
        }
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        self.model.apply_updates(ctx)?;
        check_simplex(&self.model).map_err(|e| abort(e.to_string()))?;
        self.meta.step += 1;
        Ok(StepLog {
            step,
            epoch: self.meta.epoch,
            lr,
            total,
            magnitude: parts.magnitude,
            phase: parts.phase,
            complex: parts.complex,
            grad_norm,
            batch_ids: ids.to_vec(),
        })
    }

    /// Runs at most `budget` steps (or until the configured end) without
    /// validation or checkpoint files.
    pub fn train_steps(&mut self, data: &TrainData, budget: u64) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        self.run(data, budget, &mut |_, log| {
            logs.push(log.clone());
            Ok(())
        }, &mut |_| Ok(()))?;
        Ok(logs)
    }

    /// Core loop. `on_step` sees every step; `on_epoch` runs when an epoch
    /// completes, after the epoch counter advanced.
    fn run(
        &mut self,
        data: &TrainData,
        budget: u64,
        on_step: &mut dyn FnMut(&Self, &StepLog) -> Result<()>,
        on_epoch: &mut dyn FnMut(&mut Self) -> Result<()>,
    ) -> Result<()> {
        let spe = self.steps_per_epoch(data.len());
        let mut done = 0;
        while done < budget && !self.finished(data.len()) {
            let mut rng = epoch_rng(self.meta.seed, self.meta.epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            if self.meta.batch_in_epoch > 0 {
                let pos = self.meta.rng_word_pos.parse::<u128>().map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
                rng.set_word_pos(pos);
            }
            let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
            while (self.meta.batch_in_epoch as usize) < batches.len() {
                if done >= budget || self.config.max_steps.is_some_and(|m| self.meta.step >= m) {
                    return Ok(());
                }
                let idx = batches[self.meta.batch_in_epoch as usize];
                let (noisy, clean) = self.gather(data, idx, &mut rng);
                let ids: Vec<String> = idx.iter().map(|&i| data.ids[i].clone()).collect();
                let lr = lr_schedule(self.meta.step, &self.config, spe);
                let log = self.step_on(&noisy, &clean, lr, &ids)?;
                self.meta.batch_in_epoch += 1;
                self.meta.rng_word_pos = rng.get_word_pos().to_string();
                done += 1;
                on_step(self, &log)?;
            }
            self.meta.epoch += 1;
            self.meta.batch_in_epoch = 0;
            self.meta.rng_word_pos = "0".into();
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Full training: validation SI-SNR after each epoch, `best.ckpt` and
    /// `last.ckpt` under `out_dir`, and a per-step loss log.
    pub fn fit(&mut self, train: &TrainData, valid: &TrainData, out_dir: &Path) -> Result<FitReport> {
        if train.is_empty() || valid.is_empty() {
            return Err(Error::input("training and validation sets must be nonempty"));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(LOSS_LOG);
        let fresh = !log_path.exists() || self.meta.step == 0;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        let csv_err = |e: csv::Error| Error::io(&log_path, std::io::Error::other(e));

        let mut report = FitReport::default();
        let mut epoch_losses = Vec::new();
        let last = out_dir.join(LAST_CHECKPOINT);
        let best = out_dir.join(BEST_CHECKPOINT);
        let budget = u64::MAX;
        let mut on_step = |_: &Self, log: &StepLog| -> Result<()> {
            writer.serialize(log).map_err(csv_err)?;
            writer.flush().map_err(|e| Error::io(&log_path, e))?;
            epoch_losses.push(log.total);
            report.steps.push(log.clone());
            Ok(())
        };
        let mut epochs = Vec::new();
        let mut best_written = None;
        let mut on_epoch = |t: &mut Self| -> Result<()> {
            let score = validation_si_snr(&t.model, valid)?;
            let improved = t.meta.best_valid_si_snr.is_none_or(|b| score > b);
            if improved {
                t.meta.best_valid_si_snr = Some(score);
            }
            let ck = t.checkpoint();
            ck.save(&last)?;
            if improved {
                ck.save(&best)?;
                best_written = Some(best.clone());
            }
            epochs.push(EpochLog { epoch: t.meta.epoch - 1, mean_loss: f64::NAN, valid_si_snr: Some(score) });
            Ok(())
        };
        self.run(train, budget, &mut on_step, &mut on_epoch)?;
        // An early stop through `max_steps` still leaves a resumable checkpoint.
        self.checkpoint().save(&last)?;
        if !best.exists() {
            self.checkpoint().save(&best)?;
            best_written = Some(best.clone());
        }

        let spe = self.steps_per_epoch(train.len()) as usize;
        for (e, chunk) in epochs.iter_mut().zip(epoch_losses.chunks(spe.max(1))) {
            e.mean_loss = chunk.iter().sum::<f64>() / chunk.len() as f64;
        }
        report.epochs = epochs;
        report.last = Some(last);
        report.best = best_written.or_else(|| best.exists().then_some(best));
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::decoder::RemaConfig;
    use crate::dsp::StftConfig;
    use crate::model::BspMpnetConfig;
    use crate::ssl::SslConfig;

    fn model_cfg() -> BspMpnetConfig {
        let rema = RemaConfig { model_dim: 8, heads: 2, ffn_expansion: 2, tfa_time_kernel: 3, ..RemaConfig::default() };
        BspMpnetConfig {
            stft: StftConfig { fft_size: 32, win_length: 32, hop_length: 8, ..StftConfig::default() },
            ssl: SslConfig { frame_stride: 16, ..SslConfig::default() },
            rema_mag: rema.clone(),
            rema_pha: rema,
            mp2dc_channels: 4,
            ..BspMpnetConfig::default()
        }
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2, base_lr: 2e-3, warmup_steps: 0, segment_seconds: Some(0.02), seed: 3, ..TrainConfig::default() }
    }

    fn toy_data(n: usize, len: usize) -> TrainData {
        let mut d = TrainData::default();
        for i in 0..n {
            let clean: Vec<f64> = (0..len).map(|t| (0.07 * (i + 2) as f64 * t as f64).sin() * 0.5).collect();
            let noisy: Vec<f64> = clean.iter().enumerate().map(|(t, c)| c + 0.2 * ((t * 7919 + i * 31) % 97) as f64 / 97.0 - 0.1).collect();
            d.push(format!("u{i}"), Waveform::new(clean, 16000), Waveform::new(noisy, 16000));
        }
        d
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig { base_lr: 1.0, warmup_steps: 100, decay: 0.5, decay_interval: 10, ..TrainConfig::default() };
        assert!((lr_schedule(0, &cfg, 7) - 0.01).abs() < 1e-15);
        assert_eq!(lr_schedule(100, &cfg, 7), 1.0);
        assert_eq!(lr_schedule(109, &cfg, 7), 1.0);
        assert_eq!(lr_schedule(110, &cfg, 7), 0.5);
        let per_epoch = TrainConfig { decay_interval: 0, ..cfg };
        assert_eq!(lr_schedule(107, &per_epoch, 7), 0.5);
        let no_warmup = TrainConfig { warmup_steps: 0, ..per_epoch };
        assert_eq!(lr_schedule(0, &no_warmup, 7), 1.0);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new("w", Array::from_elem(ndarray::IxDyn(&[3]), 1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![2.0, -0.5, 1e-3]).unwrap());
        let mut adam = Adam::new(&TrainConfig::default());
        adam.step(vec![&mut p], &g, 0.1);
        // The bias-corrected first step is lr * sign(g) up to eps.
        for (w, s) in p.value.iter().zip([1.0, -1.0, 1.0]) {
            assert!((w - (1.0 - 0.1 * s)).abs() < 1e-4, "{w}");
        }
        let mut frozen = Param::frozen("w", Array::from_elem(ndarray::IxDyn(&[3]), 1.0));
        adam.step(vec![&mut frozen], &g, 0.1);
        assert!(frozen.value.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Array::from_elem(ndarray::IxDyn(&[4]), 3.0));
        g.insert("b".to_string(), Array::from_elem(ndarray::IxDyn(&[1]), 4.0));
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        let after = clip_grad_norm(&mut g, 0.0);
        assert!((after - 1.0).abs() < 1e-12);
    }

    fn kendall_tau(x: &[f64]) -> f64 {
        let n = x.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += (x[j] - x[i]).signum();
            }
        }
        s / (n * (n - 1) / 2) as f64
    }

    #[test]
    fn repeated_batch_loss_trends_down() {
        let data = toy_data(2, 480);
        let cfg = TrainConfig { segment_seconds: None, ..train_cfg() };
        let mut t = Trainer::new(BspMpnet::new(model_cfg()).unwrap(), cfg, LossConfig::default()).unwrap();
        let logs = t.train_steps(&data, 50).unwrap();
        assert_eq!(logs.len(), 50);
        let losses: Vec<f64> = logs.iter().map(|l| l.total).collect();
        assert!(kendall_tau(&losses) < 0.0, "{losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let data = toy_data(3, 800);
        let fresh = || Trainer::new(BspMpnet::new(model_cfg()).unwrap(), train_cfg(), LossConfig::default()).unwrap();
        let mut a = fresh();
        let full = a.train_steps(&data, 11).unwrap();

        let mut b = fresh();
        b.train_steps(&data, 10).unwrap();
        let bytes = b.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut c = Trainer::resume(&ck, BspMpnet::new(model_cfg()).unwrap(), train_cfg(), LossConfig::default()).unwrap();
        let next = c.train_steps(&data, 1).unwrap();
        assert_eq!(next[0].step, 10);
        assert!((next[0].total - full[10].total).abs() < 1e-6);
        assert_eq!(next[0].batch_ids, full[10].batch_ids);
        for (p, q) in a.model.state().iter().zip(c.model.state()) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        assert_eq!(a.checkpoint().to_bytes().unwrap(), c.checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn fit_smoke_writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 4, seconds: 0.1, seed: 1, ..SynthSpec::default() };
        synth_dataset(&spec, &dir.path().join("data")).unwrap();
        let entries = crate::data::load_manifest(&dir.path().join("data/manifest.jsonl")).unwrap();
        let data = TrainData::load(&entries, 16000).unwrap();
        let cfg = TrainConfig { epochs: 1, segment_seconds: Some(0.05), ..train_cfg() };
        let mut t = Trainer::new(BspMpnet::new(model_cfg()).unwrap(), cfg, LossConfig::default()).unwrap();
        let out = dir.path().join("run");
        let report = t.fit(&data, &data, &out).unwrap();
        assert_eq!(report.steps.len(), 2);
        assert_eq!(report.epochs.len(), 1);
        assert!(report.epochs[0].valid_si_snr.unwrap().is_finite());
        assert!(out.join(LAST_CHECKPOINT).exists() && out.join(BEST_CHECKPOINT).exists());
        let log = std::fs::read_to_string(out.join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with("step,epoch,lr,total,magnitude,phase,complex,grad_norm"));
        let ck = Checkpoint::load(&out.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!((ck.meta.step, ck.meta.epoch), (2, 1));
    }

    #[test]
    fn optimizer_tracks_only_trainable_parameters() {
        let data = toy_data(2, 480);
        let mut t = Trainer::new(BspMpnet::new(model_cfg()).unwrap(), train_cfg(), LossConfig::default()).unwrap();
        t.train_steps(&data, 1).unwrap();
        let tracked: usize = t.optimizer.state.m.values().map(|a| a.len()).sum();
        assert_eq!(tracked, t.model.trainable_count());
    }
}
