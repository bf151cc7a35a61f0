//! JSON-lines manifests, SNR mixing, fixed-length cropping, a synthetic
//! speech-in-noise corpus, and scanners for the VoiceBank+DEMAND and WHAMR!
//! directory layouts.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::wav::{read_wav_at, write_wav, SampleFormat};
use crate::{Error, Result};

/// One training or evaluation utterance. Either `noisy` is given, or `noise`
/// together with `snr_db` for mixing on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    /// `noise`, `reverb` or `noise+reverb` for WHAMR!-style splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default)]
    pub reverberant: bool,
    pub duration: f64,
}

/// A (clean, enhanced) pair for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub clean: PathBuf,
    pub enhanced: PathBuf,
}

pub fn write_jsonl<T: Serialize>(path: &Path, entries: &[T]) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a JSON-lines file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and resolves its relative paths.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        e.clean = resolve(base, &e.clean);
        e.noisy = e.noisy.as_ref().map(|p| resolve(base, p));
        e.noise = e.noise.as_ref().map(|p| resolve(base, p));
    }
    Ok(entries)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<PairEntry> = read_jsonl(path)?;
    for e in &mut entries {
        e.clean = resolve(base, &e.clean);
        e.enhanced = resolve(base, &e.enhanced);
    }
    Ok(entries)
}

/// Checks that every referenced file exists; returns the list of missing paths.
pub fn missing_files(entries: &[ManifestEntry]) -> Vec<PathBuf> {
    entries
        .iter()
        .flat_map(|e| std::iter::once(&e.clean).chain(e.noisy.iter()).chain(e.noise.iter()))
        .filter(|p| !p.is_file())
        .cloned()
        .collect()
}

/// Reads the (clean, noisy) pair of an entry, mixing on the fly if needed.
pub fn load_pair(entry: &ManifestEntry, sample_rate: u32) -> Result<(Waveform, Waveform)> {
    let clean = read_wav_at(&entry.clean, sample_rate)?;
    let noisy = match (&entry.noisy, &entry.noise, entry.snr_db) {
        (Some(p), _, _) => read_wav_at(p, sample_rate)?,
        (None, Some(n), Some(snr)) => mix_at_snr(&clean, &read_wav_at(n, sample_rate)?, snr)?,
        _ => return Err(Error::input(format!("entry {} has neither `noisy` nor `noise` with `snr_db`", entry.id))),
    };
    if noisy.len() != clean.len() {
        return Err(Error::input(format!("entry {}: clean and noisy lengths differ", entry.id)));
    }
    Ok((clean, noisy))
}

/// `10 log10(P_clean / P_(noisy - clean))`.
pub fn measured_snr(clean: &Waveform, noisy: &Waveform) -> f64 {
    let pn = clean.samples.iter().zip(&noisy.samples).map(|(c, n)| (n - c).powi(2)).sum::<f64>();
    let pc = clean.samples.iter().map(|c| c * c).sum::<f64>();
    10.0 * (pc / pn).log10()
}

/// `clean + g * noise` with `g` set so the mixture has the requested SNR.
/// The noise is looped when shorter and cropped when longer; `+inf` returns
/// the clean signal unchanged.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.power() == 0.0 {
        return Err(Error::input("cannot mix at an SNR with a silent clean signal"));
    }
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::input(format!("invalid SNR {snr_db}")));
    }
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(Error::input("noise signal is silent"));
    }
    let n: Vec<f64> = (0..clean.len()).map(|i| noise.samples[i % noise.len()]).collect();
    let pn = n.iter().map(|x| x * x).sum::<f64>() / n.len() as f64;
    let g = (clean.power() / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(Waveform::new(clean.samples.iter().zip(&n).map(|(c, v)| c + g * v).collect(), clean.sample_rate))
}

/// Offset of a uniformly random `target`-sample crop, or `None` when the
/// input is not longer than the target.
pub fn segment_offset<R: Rng>(len: usize, target: usize, rng: &mut R) -> Option<usize> {
    (len > target).then(|| rng.random_range(0..=len - target))
}

/// Crop `target` samples from `offset`, zero-padding at the end if short.
pub fn crop_or_pad(wave: &Waveform, offset: usize, target: usize) -> Waveform {
    let mut s: Vec<f64> = wave.samples.iter().skip(offset).take(target).copied().collect();
    s.resize(target, 0.0);
    Waveform::new(s, wave.sample_rate)
}

pub fn random_segment<R: Rng>(wave: &Waveform, seconds: f64, rng: &mut R) -> Waveform {
    let target = (seconds * wave.sample_rate as f64).round() as usize;
    let off = segment_offset(wave.len(), target, rng).unwrap_or(0);
    crop_or_pad(wave, off, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    White,
    Babble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    /// SNRs cycled over the utterances.
    pub snrs_db: Vec<f64>,
    pub noise: NoiseKind,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { count: 4, seconds: 2.0, sample_rate: 16000, snrs_db: vec![0.0, 5.0, 10.0, 15.0], noise: NoiseKind::White, seed: 0 }
    }
}

/// Harmonic "voiced speech": a gliding fundamental with decaying harmonics
/// under a syllable-rate amplitude envelope.
pub fn speech_like<R: Rng>(len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let fs = sample_rate as f64;
    let f0 = rng.random_range(100.0..220.0);
    let glide = rng.random_range(-0.3..0.3);
    let syll = rng.random_range(3.0..6.0);
    let harmonics = rng.random_range(6..12);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + glide * (2.0 * PI * 0.5 * t).sin() * 0.2);
        phase += 2.0 * PI * f / fs;
        let env = (0.5 - 0.5 * (2.0 * PI * syll * t).cos()).powf(1.5);
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            if k * f < fs / 2.0 {
                v += (k * phase + ph).sin() / k;
            }
        }
        out.push(0.3 * env * v);
    }
    out
}

fn noise_signal<R: Rng>(kind: NoiseKind, len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    match kind {
        NoiseKind::White => {
            let normal = Normal::new(0.0, 0.1).unwrap();
            (0..len).map(|_| normal.sample(rng)).collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for _ in 0..6 {
                for (a, v) in acc.iter_mut().zip(speech_like(len, sample_rate, rng)) {
                    *a += v;
                }
            }
            acc
        }
    }
}

/// Writes `clean/`, `noise/`, `noisy/` WAVs and `manifest.jsonl` under `out_dir`.
/// Paths in the manifest are relative to `out_dir`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if spec.count == 0 || spec.seconds <= 0.0 || spec.snrs_db.is_empty() {
        return Err(Error::config("synthetic dataset needs count >= 1, seconds > 0 and at least one SNR"));
    }
    let len = (spec.seconds * spec.sample_rate as f64).round() as usize;
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        let clean = Waveform::new(speech_like(len, spec.sample_rate, &mut rng), spec.sample_rate);
        let noise = Waveform::new(noise_signal(spec.noise, len, spec.sample_rate, &mut rng), spec.sample_rate);
        let snr = spec.snrs_db[i % spec.snrs_db.len()];
        let noisy = mix_at_snr(&clean, &noise, snr)?;
        let id = format!("synth_{i:04}");
        let rel = |d: &str| PathBuf::from(d).join(format!("{id}.wav"));
        write_wav(&out_dir.join(rel("clean")), &clean, SampleFormat::Float32)?;
        write_wav(&out_dir.join(rel("noise")), &noise, SampleFormat::Float32)?;
        write_wav(&out_dir.join(rel("noisy")), &noisy, SampleFormat::Float32)?;
        let (clean_rel, noisy_rel, noise_rel) = (rel("clean"), rel("noisy"), rel("noise"));
        entries.push(ManifestEntry {
            id,
            clean: clean_rel,
            noisy: Some(noisy_rel),
            noise: Some(noise_rel),
            snr_db: Some(snr),
            condition: Some("noise".into()),
            reverberant: false,
            duration: spec.seconds,
        });
    }
    write_jsonl(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

fn wav_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    Ok(names)
}

fn duration_of(path: &Path) -> Result<f64> {
    Ok(crate::wav::read_wav(path)?.duration_secs())
}

fn paired_entries(clean_dir: &Path, noisy_dir: &Path, condition: Option<&str>, reverberant: bool) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for name in wav_names(noisy_dir)? {
        let clean = clean_dir.join(&name);
        if !clean.is_file() {
            return Err(Error::input(format!("{} has no clean counterpart in {}", name, clean_dir.display())));
        }
        let noisy = noisy_dir.join(&name);
        let stem = name.trim_end_matches(".wav").trim_end_matches(".WAV");
        let id = match condition {
            Some(c) => format!("{stem}:{c}"),
            None => stem.to_string(),
        };
        out.push(ManifestEntry {
            id,
            duration: duration_of(&noisy)?,
            clean,
            noisy: Some(noisy),
            noise: None,
            snr_db: None,
            condition: condition.map(str::to_string),
            reverberant,
        });
    }
    Ok(out)
}

/// VoiceBank+DEMAND: `clean_{split}_wav/` and `noisy_{split}_wav/` with
/// matching file names, where `split` is e.g. `trainset_28spk` or `testset`.
pub fn scan_voicebank(root: &Path, split: &str) -> Result<Vec<ManifestEntry>> {
    paired_entries(&root.join(format!("clean_{split}_wav")), &root.join(format!("noisy_{split}_wav")), None, false)
}

/// WHAMR! single-speaker enhancement (`wav16k/min/{tr,cv,tt}`): clean target
/// `s1_anechoic`; `mix_single_anechoic` is the noise condition, `s1_reverb`
/// the reverb condition and `mix_single_reverb` noise plus reverb.
pub fn scan_whamr(root: &Path, split: &str) -> Result<Vec<ManifestEntry>> {
    let base = root.join("wav16k").join("min").join(split);
    let clean = base.join("s1_anechoic");
    let mut out = Vec::new();
    for (dir, cond, reverb) in [("mix_single_anechoic", "noise", false), ("s1_reverb", "reverb", true), ("mix_single_reverb", "noise+reverb", true)] {
        let d = base.join(dir);
        if d.is_dir() {
            out.extend(paired_entries(&clean, &d, Some(cond), reverb)?);
        }
    }
    if out.is_empty() {
        return Err(Error::input(format!("no WHAMR! mixture directories under {}", base.display())));
    }
    Ok(out)
}

/// Entries whose condition tag equals `condition`.
pub fn filter_condition<'a>(entries: &'a [ManifestEntry], condition: &str) -> Vec<&'a ManifestEntry> {
    entries.iter().filter(|e| e.condition.as_deref() == Some(condition)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000)
    }

    #[test]
    fn mix_examples() {
        let c = noise(1000, 1);
        let n = noise(1000, 2);
        let scale = (c.power() / n.power()).sqrt();
        let n_eq = Waveform::new(n.samples.iter().map(|v| v * scale).collect(), 16000);
        let mixed = mix_at_snr(&c, &n_eq, 0.0).unwrap();
        for ((m, a), b) in mixed.samples.iter().zip(&c.samples).zip(&n_eq.samples) {
            assert!((m - a - b).abs() < 1e-12);
        }
        assert_eq!(mix_at_snr(&c, &n, f64::INFINITY).unwrap(), c);
        assert!((measured_snr(&c, &mix_at_snr(&c, &n, 7.5).unwrap()) - 7.5).abs() < 1e-6);
        assert!(mix_at_snr(&Waveform::zeros(10, 16000), &n, 0.0).is_err());
        let looped = mix_at_snr(&c, &noise(300, 3), 5.0).unwrap();
        assert_eq!(looped.len(), c.len());
    }

    proptest! {
        #[test]
        fn mixing_is_exact(seed in 0u64..500, snr in -6.0f64..17.5) {
            let c = noise(800, seed);
            let n = noise(1200, seed + 7);
            let m = mix_at_snr(&c, &n, snr).unwrap();
            prop_assert!((measured_snr(&c, &m) - snr).abs() < 1e-6);
        }

        #[test]
        fn segments_have_exact_length(len in 1usize..5000, secs in 0.01f64..0.3, seed in 0u64..100) {
            let w = noise(len, seed);
            let s = random_segment(&w, secs, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(s.len(), (secs * 16000.0).round() as usize);
            prop_assert_eq!(s.sample_rate, 16000);
        }
    }

    #[test]
    fn segment_examples() {
        let two = noise(32000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_segment(&two, 2.0, &mut rng), two);
        let one = noise(16000, 5);
        let padded = random_segment(&one, 2.0, &mut rng);
        assert_eq!(&padded.samples[..16000], &one.samples[..]);
        assert!(padded.samples[16000..].iter().all(|&x| x == 0.0));
        let ten = noise(160000, 6);
        let a = random_segment(&ten, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_segment(&ten, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn synth_dataset_contract() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 4, seconds: 0.5, snrs_db: vec![0.0, 5.0], ..SynthSpec::default() };
        let entries = synth_dataset(&spec, dir.path()).unwrap();
        assert_eq!(entries.len(), 4);
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.len(), 4);
        assert!(missing_files(&loaded).is_empty());
        for e in &loaded {
            let (c, n) = load_pair(e, 16000).unwrap();
            assert_eq!(c.sample_rate, 16000);
            assert_eq!(c.len(), 8000);
            assert!((measured_snr(&c, &n) - e.snr_db.unwrap()).abs() < 0.01);
        }
        let dir2 = tempfile::tempdir().unwrap();
        synth_dataset(&spec, dir2.path()).unwrap();
        for sub in ["clean", "noisy", "noise"] {
            let a = fs::read(dir.path().join(sub).join("synth_0002.wav")).unwrap();
            let b = fs::read(dir2.path().join(sub).join("synth_0002.wav")).unwrap();
            assert_eq!(a, b);
        }
        let babble = SynthSpec { noise: NoiseKind::Babble, count: 1, seconds: 0.25, ..SynthSpec::default() };
        assert_eq!(synth_dataset(&babble, dir2.path()).unwrap().len(), 1);
    }

    #[test]
    fn manifest_round_trip_and_on_the_fly_mixing() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 1, seconds: 0.25, ..SynthSpec::default() };
        let mut e = synth_dataset(&spec, dir.path()).unwrap().remove(0);
        e.noisy = None;
        e.snr_db = Some(3.0);
        let p = dir.path().join("otf.jsonl");
        write_jsonl(&p, std::slice::from_ref(&e)).unwrap();
        let raw: Vec<ManifestEntry> = read_jsonl(&p).unwrap();
        assert_eq!(raw, vec![e.clone()]);
        let loaded = load_manifest(&p).unwrap();
        let (c, n) = load_pair(&loaded[0], 16000).unwrap();
        assert!((measured_snr(&c, &n) - 3.0).abs() < 1e-4);
        fs::write(&p, "{\"id\": 1}\n").unwrap();
        assert!(matches!(read_jsonl::<ManifestEntry>(&p), Err(Error::Input(_))));
    }

    #[test]
    fn layout_scanners() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::zeros(160, 16000);
        for sub in ["clean_testset_wav", "noisy_testset_wav"] {
            for name in ["p232_001.wav", "p232_002.wav"] {
                write_wav(&dir.path().join(sub).join(name), &w, SampleFormat::Pcm16).unwrap();
            }
        }
        let vb = scan_voicebank(dir.path(), "testset").unwrap();
        assert_eq!(vb.len(), 2);
        assert_eq!(vb[0].id, "p232_001");
        assert!((vb[0].duration - 0.01).abs() < 1e-12);

        let base = dir.path().join("whamr/wav16k/min/tt");
        for sub in ["s1_anechoic", "mix_single_anechoic", "s1_reverb", "mix_single_reverb"] {
            write_wav(&base.join(sub).join("a.wav"), &w, SampleFormat::Pcm16).unwrap();
        }
        let wh = scan_whamr(&dir.path().join("whamr"), "tt").unwrap();
        assert_eq!(wh.len(), 3);
        assert_eq!(filter_condition(&wh, "noise+reverb").len(), 1);
        assert!(filter_condition(&wh, "reverb")[0].reverberant);
        assert!(scan_whamr(dir.path(), "cv").is_err());
    }
}
