//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function has a plain-Rust twin returning `Result<_, String>`
//! so the crate is testable without a JavaScript host.

use bspmpnet::data::{mix_at_snr, speech_like};
use bspmpnet::decoder::lsigmoid;
use bspmpnet::dsp::{apply_pcs, compress_magnitude, default_band_table, make_bif_gains, stft, StftConfig, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SAMPLE_RATE: u32 = 16_000;

fn stft_config(fft_size: usize, hop: usize) -> Result<StftConfig, String> {
    let cfg = StftConfig { sample_rate: SAMPLE_RATE, fft_size, win_length: fft_size, hop_length: hop, ..StftConfig::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Compressed and PCS-boosted magnitude planes, frequency-major
/// (`value[k * frames + t]`).
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    compressed: Vec<f32>,
    boosted: Vec<f32>,
    gains: Vec<f32>,
}

#[wasm_bindgen]
impl Spectrogram {
    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn compressed(&self) -> Vec<f32> {
        self.compressed.clone()
    }

    pub fn boosted(&self) -> Vec<f32> {
        self.boosted.clone()
    }

    pub fn gains(&self) -> Vec<f32> {
        self.gains.clone()
    }

    /// Largest value over both planes, for a shared colour scale.
    pub fn peak(&self) -> f32 {
        self.compressed.iter().chain(&self.boosted).copied().fold(0.0, f32::max)
    }
}

pub fn make_demo_signal(seconds: f64, snr_db: f64, seed: u64) -> Result<Vec<f32>, String> {
    if !(seconds > 0.0 && seconds <= 10.0) {
        return Err(format!("duration must lie in (0, 10] s, got {seconds}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * SAMPLE_RATE as f64).round() as usize;
    let clean = Waveform::new(speech_like(len, SAMPLE_RATE, &mut rng), SAMPLE_RATE);
    let noise = Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), SAMPLE_RATE);
    let noisy = mix_at_snr(&clean, &noise, snr_db).map_err(|e| e.to_string())?;
    Ok(noisy.samples.iter().map(|&x| x as f32).collect())
}

pub fn make_spectrogram(samples: &[f32], fft_size: usize, hop: usize) -> Result<Spectrogram, String> {
    let cfg = stft_config(fft_size, hop)?;
    let wave = Waveform::new(samples.iter().map(|&x| x as f64).collect(), SAMPLE_RATE);
    let spec = stft(&wave, &cfg).map_err(|e| e.to_string())?;
    let cmag = compress_magnitude(&spec.magnitude).map_err(|e| e.to_string())?;
    let gains = make_bif_gains(&cfg, &default_band_table()).map_err(|e| e.to_string())?;
    let boosted = apply_pcs(&cmag, &gains).map_err(|e| e.to_string())?;
    Ok(Spectrogram {
        bins: cmag.nrows(),
        frames: cmag.ncols(),
        compressed: cmag.iter().map(|&v| v as f32).collect(),
        boosted: boosted.iter().map(|&v| v as f32).collect(),
        gains: gains.as_slice().iter().map(|&g| g as f32).collect(),
    })
}

/// `points` samples of `lsigmoid` on an even grid over `[t_min, t_max]`.
pub fn make_lsigmoid_curve(alpha: f64, beta: f64, t_min: f64, t_max: f64, points: usize) -> Result<Vec<f64>, String> {
    if points < 2 || !(t_max > t_min) {
        return Err("need at least two points on a nonempty interval".into());
    }
    let step = (t_max - t_min) / (points - 1) as f64;
    Ok((0..points).map(|i| lsigmoid(t_min + i as f64 * step, alpha, beta)).collect())
}

pub fn make_bif_gains_for(fft_size: usize) -> Result<Vec<f64>, String> {
    let cfg = stft_config(fft_size, fft_size / 4)?;
    Ok(make_bif_gains(&cfg, &default_band_table()).map_err(|e| e.to_string())?.as_slice().to_vec())
}

#[wasm_bindgen(js_name = demoSignal)]
pub fn demo_signal(seconds: f64, snr_db: f64, seed: u32) -> Result<Vec<f32>, JsError> {
    make_demo_signal(seconds, snr_db, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = spectrogramPcs)]
pub fn spectrogram_pcs(samples: &[f32], fft_size: usize, hop: usize) -> Result<Spectrogram, JsError> {
    make_spectrogram(samples, fft_size, hop).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lsigmoidCurve)]
pub fn lsigmoid_curve(alpha: f64, beta: f64, t_min: f64, t_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    make_lsigmoid_curve(alpha, beta, t_min, t_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = bifGains)]
pub fn bif_gains(fft_size: usize) -> Result<Vec<f64>, JsError> {
    make_bif_gains_for(fft_size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sampleRate)]
pub fn sample_rate() -> u32 {
    SAMPLE_RATE
}
