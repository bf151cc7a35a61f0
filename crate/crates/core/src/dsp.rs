//! STFT analysis/synthesis, log compression and perceptual contrast
//! stretching (PCS) of magnitude spectra.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann window.
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub center: bool,
}

impl Default for StftConfig {
    /// 32 ms FFT, 25 ms window, 6.25 ms hop at 16 kHz.
    fn default() -> Self {
        Self { sample_rate: 16000, fft_size: 512, win_length: 400, hop_length: 100, window: WindowKind::Hann, center: true }
    }
}

impl StftConfig {
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::config("fft_size, win_length and hop_length must be positive"));
        }
        if self.win_length > self.fft_size {
            return Err(Error::config(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length > self.win_length {
            return Err(Error::config(format!(
                "hop_length {} exceeds win_length {}",
                self.hop_length, self.win_length
            )));
        }
        let env = window_envelope(self);
        if env.iter().any(|&e| e <= 1e-10) {
            return Err(Error::config("window/hop pair leaves samples uncovered"));
        }
        Ok(())
    }

    /// Frame count produced for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        if self.center {
            len / self.hop_length + 1
        } else {
            (len.saturating_sub(self.fft_size)) / self.hop_length + 1
        }
    }

    /// Window of `win_length` samples centred inside an `fft_size` frame.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let left = (self.fft_size - self.win_length) / 2;
        for (i, v) in hann_periodic(self.win_length).into_iter().enumerate() {
            w[left + i] = v;
        }
        w
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Sum of squared windows at each phase of one hop period (steady state).
pub fn window_envelope(cfg: &StftConfig) -> Vec<f64> {
    let w = cfg.padded_window();
    let mut env = vec![0.0; cfg.hop_length];
    for (i, v) in w.iter().enumerate() {
        env[i % cfg.hop_length] += v * v;
    }
    env
}

/// Magnitude/phase pair of one STFT, `F x T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroPair {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub config: StftConfig,
}

impl SpectroPair {
    pub fn new(magnitude: Array2<f64>, phase: Array2<f64>, config: StftConfig) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return Err(Error::input(format!(
                "magnitude {:?} and phase {:?} differ in shape",
                magnitude.dim(),
                phase.dim()
            )));
        }
        if magnitude.nrows() != config.freq_bins() {
            return Err(Error::input(format!(
                "{} frequency rows, expected {}",
                magnitude.nrows(),
                config.freq_bins()
            )));
        }
        Ok(Self { magnitude, phase, config })
    }

    pub fn frames(&self) -> usize {
        self.magnitude.ncols()
    }

    pub fn real(&self) -> Array2<f64> {
        ndarray::Zip::from(&self.magnitude).and(&self.phase).map_collect(|&m, &p| m * p.cos())
    }

    pub fn imag(&self) -> Array2<f64> {
        ndarray::Zip::from(&self.magnitude).and(&self.phase).map_collect(|&m, &p| m * p.sin())
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut w = p - 2.0 * PI * (p / (2.0 * PI)).round();
    if w <= -PI {
        w += 2.0 * PI;
    }
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<SpectroPair> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::config(format!(
            "waveform sample rate {} does not match STFT sample rate {}",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    if wave.is_empty() {
        return Err(Error::input("cannot analyse an empty waveform"));
    }
    let n = cfg.fft_size;
    let frames = cfg.frames(wave.len());
    let pad = if cfg.center { n / 2 } else { 0 };
    let window = cfg.padded_window();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let bins = cfg.freq_bins();
    let mut mag = Array2::zeros((bins, frames));
    let mut pha = Array2::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = (t * cfg.hop_length) as isize - pad as isize;
        for (k, b) in buf.iter_mut().enumerate() {
            let idx = start + k as isize;
            let x = if cfg.center {
                wave.samples[reflect_index(idx, wave.len())]
            } else {
                wave.samples.get(idx as usize).copied().unwrap_or(0.0)
            };
            *b = Complex::new(x * window[k], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            let c = buf[f];
            mag[[f, t]] = c.norm();
            pha[[f, t]] = if c.re == 0.0 && c.im == 0.0 { 0.0 } else { wrap_phase(c.im.atan2(c.re)) };
        }
    }
    SpectroPair::new(mag, pha, cfg.clone())
}

/// Largest output length `istft` can synthesise from `frames` frames.
pub fn synthesizable_len(cfg: &StftConfig, frames: usize) -> usize {
    let total = cfg.fft_size + cfg.hop_length * frames.saturating_sub(1);
    if cfg.center {
        total - cfg.fft_size / 2
    } else {
        total
    }
}

/// Weighted overlap-add synthesis, normalised by the squared-window envelope.
pub fn istft(spec: &SpectroPair, length: usize) -> Result<Waveform> {
    let cfg = &spec.config;
    if spec.magnitude.dim() != spec.phase.dim() || spec.magnitude.nrows() != cfg.freq_bins() {
        return Err(Error::input("inconsistent spectrogram shapes"));
    }
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::input("spectrogram has no frames"));
    }
    let max_len = synthesizable_len(cfg, frames);
    if length > max_len {
        return Err(Error::input(format!("requested {length} samples but only {max_len} are synthesizable")));
    }
    let n = cfg.fft_size;
    let bins = cfg.freq_bins();
    let window = cfg.padded_window();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = n + cfg.hop_length * (frames - 1);
    let mut out = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for f in 0..bins {
            let (m, p) = (spec.magnitude[[f, t]], spec.phase[[f, t]]);
            buf[f] = Complex::from_polar(m, p);
        }
        // Hermitian completion; DC and Nyquist bins must be real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for f in bins..n {
            buf[f] = buf[n - f].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_length;
        for k in 0..n {
            out[start + k] += buf[k].re / n as f64 * window[k];
            env[start + k] += window[k] * window[k];
        }
    }
    let offset = if cfg.center { n / 2 } else { 0 };
    let samples = (0..length)
        .map(|i| {
            let j = i + offset;
            if env[j] > 1e-11 {
                out[j] / env[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, cfg.sample_rate))
}

/// `log(mag + 1)` elementwise.
pub fn compress_magnitude(mag: &Array2<f64>) -> Result<Array2<f64>> {
    if mag.iter().any(|&m| m < 0.0 || m.is_nan()) {
        return Err(Error::input("magnitude must be nonnegative"));
    }
    Ok(mag.mapv(f64::ln_1p))
}

/// `exp(cmag) - 1` elementwise; inverse of [`compress_magnitude`].
pub fn decompress_magnitude(cmag: &Array2<f64>) -> Array2<f64> {
    cmag.mapv(f64::exp_m1)
}

/// Per-bin band-importance gains used by PCS.
#[derive(Clone, Debug, PartialEq)]
pub struct BifGains {
    per_bin_gain: Vec<f64>,
}

impl BifGains {
    pub fn unit(bins: usize) -> Self {
        Self { per_bin_gain: vec![1.0; bins] }
    }

    pub fn from_vec(per_bin_gain: Vec<f64>) -> Result<Self> {
        if per_bin_gain.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::config("BIF gains must be positive and finite"));
        }
        Ok(Self { per_bin_gain })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.per_bin_gain
    }

    pub fn len(&self) -> usize {
        self.per_bin_gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_bin_gain.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
    pub gain: f64,
}

const DEFAULT_BAND_TABLE: &str = include_str!("../data/pcs_band_table.txt");

/// Parse a band table: one `low_hz high_hz gain` triple per line, `#` comments.
pub fn parse_band_table(text: &str) -> Result<Vec<Band>> {
    let mut bands = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[low_hz, high_hz, gain]) => bands.push(Band { low_hz, high_hz, gain }),
            _ => {
                return Err(Error::config(format!(
                    "band table line {}: expected `low_hz high_hz gain`, got {raw:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(bands)
}

pub fn default_band_table() -> Vec<Band> {
    parse_band_table(DEFAULT_BAND_TABLE).expect("bundled band table is valid")
}

pub fn load_band_table(path: &Path) -> Result<Vec<Band>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_band_table(&text)
}

/// Assign each bin's centre frequency `k * sr / n` to the band containing it.
/// Bands must tile `[0, nyquist]` contiguously; the last band is closed.
pub fn make_bif_gains(cfg: &StftConfig, bands: &[Band]) -> Result<BifGains> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let first = bands.first().ok_or_else(|| Error::config("band table is empty"))?;
    if first.low_hz != 0.0 {
        return Err(Error::config(format!("band table starts at {} Hz, not 0", first.low_hz)));
    }
    for (i, b) in bands.iter().enumerate() {
        if !(b.gain > 0.0) {
            return Err(Error::config(format!("band {i} has nonpositive gain {}", b.gain)));
        }
        if !(b.high_hz > b.low_hz) {
            return Err(Error::config(format!("band {i} is empty: [{}, {}]", b.low_hz, b.high_hz)));
        }
        if let Some(next) = bands.get(i + 1) {
            if next.low_hz > b.high_hz {
                return Err(Error::config(format!("gap between {} Hz and {} Hz", b.high_hz, next.low_hz)));
            }
            if next.low_hz < b.high_hz {
                return Err(Error::config(format!("bands overlap at {} Hz", next.low_hz)));
            }
        }
    }
    let last = bands.last().unwrap();
    if last.high_hz != nyquist {
        return Err(Error::config(format!("band table ends at {} Hz, Nyquist is {nyquist} Hz", last.high_hz)));
    }
    let gains = (0..cfg.freq_bins())
        .map(|k| {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let idx = bands.partition_point(|b| b.high_hz <= f).min(bands.len() - 1);
            bands[idx].gain
        })
        .collect();
    BifGains::from_vec(gains)
}

/// `cmag(w, t) * gain(w)`, broadcast over time.
pub fn apply_pcs(cmag: &Array2<f64>, gains: &BifGains) -> Result<Array2<f64>> {
    if gains.len() != cmag.nrows() {
        return Err(Error::config(format!("{} gains for {} frequency bins", gains.len(), cmag.nrows())));
    }
    let mut out = cmag.clone();
    for (mut row, &g) in out.rows_mut().into_iter().zip(gains.as_slice()) {
        row *= g;
    }
    Ok(out)
}
