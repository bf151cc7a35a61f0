//! Objective metrics (SI-SNR, spectral cosine similarity, LLR, STOI), a
//! real-time-factor harness, an adapter for external metric tools, and
//! the evaluation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{SpectroPair, Waveform};
use crate::{Error, Result};

const EPS: f64 = 1e-8;

pub fn si_snr(target: &Waveform, estimate: &Waveform) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(Error::input(format!("length mismatch: {} vs {}", target.len(), estimate.len())));
    }
    let n = target.len() as f64;
    let mt = target.samples.iter().sum::<f64>() / n;
    let me = estimate.samples.iter().sum::<f64>() / n;
    let t: Vec<f64> = target.samples.iter().map(|x| x - mt).collect();
    let e: Vec<f64> = estimate.samples.iter().map(|x| x - me).collect();
    let tt: f64 = t.iter().map(|x| x * x).sum();
    if tt == 0.0 {
        return Err(Error::input("SI-SNR target is all zeros"));
    }
    let scale = t.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / tt;
    let s_energy = scale * scale * tt;
    let noise: f64 = t.iter().zip(&e).map(|(a, b)| (b - scale * a).powi(2)).sum();
    Ok(10.0 * (s_energy / (noise + EPS)).log10())
}

/// Mean over frames of the cosine between magnitude columns. A frame where
/// both columns are zero counts as 1, a frame where one is zero as 0.
pub fn cosine_similarity(clean: &SpectroPair, enhanced: &SpectroPair) -> Result<f64> {
    cosine_frames(&clean.magnitude, &enhanced.magnitude)
}

pub fn cosine_frames(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.ncols() == 0 {
        return Err(Error::input(format!("spectra shapes {:?} and {:?} differ or are empty", a.dim(), b.dim())));
    }
    let mut total = 0.0;
    for (ca, cb) in a.columns().into_iter().zip(b.columns()) {
        let na = ca.dot(&ca).sqrt();
        let nb = cb.dot(&cb).sqrt();
        total += match (na == 0.0, nb == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (ca.dot(&cb) / (na * nb)).clamp(-1.0, 1.0),
        };
    }
    Ok(total / a.ncols() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfStats {
    pub processing_secs: f64,
    pub audio_secs: f64,
    pub rtf: f64,
}

/// Wall time of `f` over `utterances` divided by their total duration.
pub fn rtf<F>(utterances: &[Waveform], mut f: F) -> Result<RtfStats>
where
    F: FnMut(&Waveform) -> Result<Waveform>,
{
    if utterances.is_empty() {
        return Err(Error::input("RTF needs at least one utterance"));
    }
    let audio_secs: f64 = utterances.iter().map(Waveform::duration_secs).sum();
    if audio_secs <= 0.0 {
        return Err(Error::input("utterances have zero total duration"));
    }
    let start = Instant::now();
    for u in utterances {
        f(u)?;
    }
    let processing_secs = start.elapsed().as_secs_f64();
    Ok(RtfStats { processing_secs, audio_secs, rtf: processing_secs / audio_secs })
}

/// Autocorrelation lags `0..=order` of a frame.
pub fn autocorrelation(frame: &[f64], order: usize) -> Vec<f64> {
    (0..=order).map(|k| frame.iter().zip(&frame[k.min(frame.len())..]).map(|(a, b)| a * b).sum()).collect()
}

/// Levinson-Durbin recursion. Returns `[1, a_1, ..., a_p]` of the prediction
/// error filter, or `None` for a degenerate (zero-energy or unstable) frame.
pub fn levinson(r: &[f64]) -> Option<Vec<f64>> {
    let p = r.len() - 1;
    if r[0] <= 0.0 {
        return None;
    }
    let mut a = vec![0.0; p + 1];
    a[0] = 1.0;
    let mut err = r[0];
    for i in 1..=p {
        let acc: f64 = (0..i).map(|j| a[j] * r[i - j]).sum();
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            return None;
        }
    }
    Some(a)
}

fn quad_form(a: &[f64], r: &[f64]) -> f64 {
    let p = a.len();
    let mut s = 0.0;
    for i in 0..p {
        for j in 0..p {
            s += a[i] * r[i.abs_diff(j)] * a[j];
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlrConfig {
    pub frame: usize,
    pub hop: usize,
    pub order: usize,
    /// Fraction of the smallest frame values kept in the mean.
    pub keep: f64,
    pub clip: f64,
}

impl Default for LlrConfig {
    fn default() -> Self {
        Self { frame: 400, hop: 100, order: 16, keep: 0.95, clip: 2.0 }
    }
}

/// Log-likelihood ratio of one pair of frames, `None` when either is degenerate.
pub fn frame_llr(clean: &[f64], processed: &[f64], order: usize) -> Option<f64> {
    let rc = autocorrelation(clean, order);
    let rp = autocorrelation(processed, order);
    let ac = levinson(&rc)?;
    let ap = levinson(&rp)?;
    let num = quad_form(&ap, &rc);
    let den = quad_form(&ac, &rc);
    (den > 0.0).then(|| (num / den).ln().max(0.0))
}

/// Mean frame LLR over the lowest `keep` fraction of frames, each clipped to `[0, clip]`.
pub fn llr_with(clean: &Waveform, enhanced: &Waveform, cfg: &LlrConfig) -> Result<f64> {
    if clean.len() != enhanced.len() {
        return Err(Error::input(format!("length mismatch: {} vs {}", clean.len(), enhanced.len())));
    }
    let window = crate::dsp::hann_periodic(cfg.frame);
    let mut values = Vec::new();
    let mut start = 0;
    while start + cfg.frame <= clean.len() {
        let c: Vec<f64> = (0..cfg.frame).map(|i| clean.samples[start + i] * window[i]).collect();
        let e: Vec<f64> = (0..cfg.frame).map(|i| enhanced.samples[start + i] * window[i]).collect();
        if let Some(v) = frame_llr(&c, &e, cfg.order) {
            values.push(v.min(cfg.clip));
        }
        start += cfg.hop;
    }
    if values.is_empty() {
        return Err(Error::input("no non-degenerate frames for LLR"));
    }
    values.sort_by(f64::total_cmp);
    let kept = ((values.len() as f64 * cfg.keep).round() as usize).max(1);
    Ok(values[..kept].iter().sum::<f64>() / kept as f64)
}

pub fn llr(clean: &Waveform, enhanced: &Waveform) -> Result<f64> {
    llr_with(clean, enhanced, &LlrConfig::default())
}

#[cfg(feature = "stoi")]
pub mod stoi {
    //! Short-time objective intelligibility on 10 kHz signals, 15 third-octave
    //! bands from 150 Hz, 384 ms analysis segments.

    use rustfft::{num_complex::Complex, FftPlanner};

    use crate::dsp::Waveform;
    use crate::{Error, Result};

    const FS: u32 = 10_000;
    const FRAME: usize = 256;
    const NFFT: usize = 512;
    const BANDS: usize = 15;
    const MIN_FREQ: f64 = 150.0;
    const SEGMENT: usize = 30;
    const BETA_DB: f64 = -15.0;
    const DYN_RANGE: f64 = 40.0;

    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    /// Rational resampling with a Hann-windowed sinc low-pass filter.
    pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
        if from == to {
            return x.to_vec();
        }
        let g = gcd(from, to);
        let (up, down) = ((to / g) as usize, (from / g) as usize);
        let cutoff = 0.5 / up.max(down) as f64;
        let half = 10 * up.max(down);
        let taps: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let n = i as f64 - half as f64;
                let sinc = if n == 0.0 { 2.0 * cutoff } else { (2.0 * std::f64::consts::PI * cutoff * n).sin() / (std::f64::consts::PI * n) };
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (2 * half) as f64).cos();
                sinc * w * up as f64
            })
            .collect();
        let out_len = (x.len() * up).div_ceil(down);
        (0..out_len)
            .map(|m| {
                let centre = m * down;
                let mut acc = 0.0;
                let lo = centre.saturating_sub(half);
                let hi = centre + half;
                let mut k = lo.div_ceil(up) * up;
                while k <= hi {
                    let xi = k / up;
                    if xi < x.len() {
                        acc += x[xi] * taps[k + half - centre];
                    }
                    k += up;
                }
                acc
            })
            .collect()
    }

    fn window() -> Vec<f64> {
        // Symmetric Hann of length FRAME + 2 with the zero end points dropped.
        (1..=FRAME).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME + 1) as f64).cos()).collect()
    }

    fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = window();
        let hop = FRAME / 2;
        let starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + FRAME <= x.len()).collect();
        let energy: Vec<f64> = starts
            .iter()
            .map(|&s| 20.0 * ((0..FRAME).map(|i| (x[s + i] * w[i]).powi(2)).sum::<f64>().sqrt() + f64::EPSILON).log10())
            .collect();
        let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<usize> = starts.iter().zip(&energy).filter(|(_, &e)| e > max - DYN_RANGE).map(|(&s, _)| s).collect();
        let len = if kept.is_empty() { 0 } else { (kept.len() - 1) * hop + FRAME };
        let mut xs = vec![0.0; len];
        let mut ys = vec![0.0; len];
        for (j, &s) in kept.iter().enumerate() {
            for i in 0..FRAME {
                xs[j * hop + i] += x[s + i] * w[i];
                ys[j * hop + i] += y[s + i] * w[i];
            }
        }
        (xs, ys)
    }

    fn band_matrix() -> Vec<(usize, usize)> {
        let freqs: Vec<f64> = (0..=NFFT / 2).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
        let nearest = |f: f64| {
            freqs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - f).powi(2).total_cmp(&(b.1 - f).powi(2)))
                .map(|(i, _)| i)
                .unwrap()
        };
        (0..BANDS)
            .map(|k| {
                let lo = MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
                let hi = MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
                (nearest(lo), nearest(hi))
            })
            .collect()
    }

    fn third_octave(sig: &[f64]) -> Vec<Vec<f64>> {
        let w = window();
        let hop = FRAME / 2;
        let fft = FftPlanner::new().plan_fft_forward(NFFT);
        let bands = band_matrix();
        let mut out = vec![Vec::new(); BANDS];
        let mut s = 0;
        while s + FRAME <= sig.len() {
            let mut buf: Vec<Complex<f64>> = (0..NFFT)
                .map(|i| Complex::new(if i < FRAME { sig[s + i] * w[i] } else { 0.0 }, 0.0))
                .collect();
            fft.process(&mut buf);
            for (b, &(lo, hi)) in bands.iter().enumerate() {
                out[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
            }
            s += hop;
        }
        out
    }

    pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
        if clean.len() != processed.len() {
            return Err(Error::input(format!("length mismatch: {} vs {}", clean.len(), processed.len())));
        }
        if clean.sample_rate != processed.sample_rate {
            return Err(Error::config("STOI inputs have different sample rates"));
        }
        let x = resample(&clean.samples, clean.sample_rate, FS);
        let y = resample(&processed.samples, processed.sample_rate, FS);
        let (x, y) = remove_silent_frames(&x, &y);
        let xt = third_octave(&x);
        let yt = third_octave(&y);
        let frames = xt[0].len();
        if frames < SEGMENT {
            return Err(Error::input(format!("STOI needs at least {SEGMENT} non-silent frames, found {frames}")));
        }
        let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
        let mut total = 0.0;
        let mut count = 0usize;
        for m in SEGMENT..=frames {
            for b in 0..BANDS {
                let xs = &xt[b][m - SEGMENT..m];
                let ys = &yt[b][m - SEGMENT..m];
                let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
                let alpha = nx / (ny + f64::EPSILON);
                let yp: Vec<f64> = ys.iter().zip(xs).map(|(&yv, &xv)| (yv * alpha).min(xv * clip)).collect();
                let mx = xs.iter().sum::<f64>() / SEGMENT as f64;
                let my = yp.iter().sum::<f64>() / SEGMENT as f64;
                let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
                let yc: Vec<f64> = yp.iter().map(|v| v - my).collect();
                let num: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
                let den = xc.iter().map(|v| v * v).sum::<f64>().sqrt() * yc.iter().map(|v| v * v).sum::<f64>().sqrt();
                total += num / (den + f64::EPSILON);
                count += 1;
            }
        }
        Ok(total / count as f64)
    }
}

/// A user-configured command producing one score per (clean, enhanced) pair.
/// `{clean}` and `{enhanced}` in the command are replaced with file paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetric {
    pub name: String,
    pub command: String,
}

impl ExternalMetric {
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, command) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("external metric `{spec}` is not NAME=COMMAND")))?;
        if name.trim().is_empty() || command.trim().is_empty() {
            return Err(Error::config(format!("external metric `{spec}` is not NAME=COMMAND")));
        }
        Ok(Self { name: name.trim().to_string(), command: command.to_string() })
    }

    pub fn run(&self, clean: &Path, enhanced: &Path) -> Result<f64> {
        let cmd = self
            .command
            .replace("{clean}", &clean.display().to_string())
            .replace("{enhanced}", &enhanced.display().to_string());
        let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| Error::io("sh", e))?;
        if !out.status.success() {
            return Err(Error::input(format!("`{cmd}` exited with {}", out.status)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        stdout
            .split(|c: char| c.is_whitespace() || c == ',' || c == ';')
            .find_map(|tok| tok.parse::<f64>().ok().filter(|v| v.is_finite()))
            .ok_or_else(|| Error::input(format!("`{cmd}` printed no number: {stdout:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
}

/// Per-utterance scores; aggregates are arithmetic means per metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScores>,
    pub rtf: Option<RtfStats>,
}

impl EvalReport {
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.utterances.iter().flat_map(|u| u.scores.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn aggregate(&self) -> BTreeMap<String, f64> {
        self.metric_names()
            .into_iter()
            .filter_map(|m| {
                let vals: Vec<f64> = self.utterances.iter().filter_map(|u| u.scores.get(&m).copied()).collect();
                (!vals.is_empty()).then(|| (m, vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
        let mut header = vec!["id".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for u in &self.utterances {
            let mut row = vec![u.id.clone()];
            row.extend(names.iter().map(|n| u.scores.get(n).map(|v| format!("{v}")).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let agg = self.aggregate();
        let mut row = vec!["mean".to_string()];
        row.extend(names.iter().map(|n| agg.get(n).map(|v| format!("{v}")).unwrap_or_default()));
        w.write_record(&row).map_err(csv_err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?).map_err(|e| Error::input(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            utterances: &'a [UtteranceScores],
            aggregate: BTreeMap<String, f64>,
            rtf: Option<RtfStats>,
        }
        Ok(serde_json::to_string_pretty(&Out { utterances: &self.utterances, aggregate: self.aggregate(), rtf: self.rtf })?)
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        for p in [csv_path, json_path] {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))
    }

    /// Fixed-width aggregate table, one column per metric.
    pub fn summary_table(&self) -> String {
        let agg = self.aggregate();
        let mut head = format!("{:<10}", "");
        let mut vals = format!("{:<10}", "mean");
        for (k, v) in &agg {
            let w = k.len().max(9) + 2;
            head.push_str(&format!("{k:>w$}"));
            vals.push_str(&format!("{v:>w$.4}"));
        }
        let mut s = format!("{head}\n{vals}\n");
        if let Some(r) = &self.rtf {
            s.push_str(&format!("RTF {:.4} ({:.2} s for {:.2} s audio)\n", r.rtf, r.processing_secs, r.audio_secs));
        }
        s
    }
}

/// Which in-repo metrics to compute per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub si_snr: bool,
    pub cosine: bool,
    pub llr: bool,
    pub stoi: bool,
    pub external: Vec<ExternalMetric>,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self { si_snr: true, cosine: true, llr: false, stoi: false, external: Vec::new() }
    }
}

/// Scores one (clean, enhanced) pair of files.
pub fn score_pair(clean_path: &Path, enhanced_path: &Path, set: &MetricSet, stft: &crate::dsp::StftConfig) -> Result<BTreeMap<String, f64>> {
    let clean = crate::wav::read_wav_at(clean_path, stft.sample_rate)?;
    let enhanced = crate::wav::read_wav_at(enhanced_path, stft.sample_rate)?;
    if clean.len() != enhanced.len() {
        return Err(Error::input(format!(
            "{} has {} samples but {} has {}",
            clean_path.display(),
            clean.len(),
            enhanced_path.display(),
            enhanced.len()
        )));
    }
    let mut scores = BTreeMap::new();
    if set.si_snr {
        scores.insert("si_snr".to_string(), si_snr(&clean, &enhanced)?);
    }
    if set.cosine {
        let a = crate::dsp::stft(&clean, stft)?;
        let b = crate::dsp::stft(&enhanced, stft)?;
        scores.insert("cosine".to_string(), cosine_similarity(&a, &b)?);
    }
    if set.llr {
        scores.insert("llr".to_string(), llr(&clean, &enhanced)?);
    }
    if set.stoi {
        #[cfg(feature = "stoi")]
        scores.insert("stoi".to_string(), stoi::stoi(&clean, &enhanced)?);
        #[cfg(not(feature = "stoi"))]
        return Err(Error::config("built without the `stoi` feature"));
    }
    for ext in &set.external {
        scores.insert(ext.name.clone(), ext.run(clean_path, enhanced_path)?);
    }
    Ok(scores)
}
