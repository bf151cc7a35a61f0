//! Mono RIFF/WAVE reader and writer (16-bit PCM and 32-bit float).

use std::fs;
use std::path::Path;

use crate::dsp::Waveform;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SampleFormat {
    #[default]
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::input("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::input("truncated fmt chunk"));
                }
                let mut tag = u16_at(body, 0);
                if tag == FORMAT_EXTENSIBLE && body.len() >= 26 {
                    tag = u16_at(body, 24);
                }
                fmt = Some((tag, u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| Error::input("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::input("missing data chunk"))?;
    if channels != 1 {
        return Err(Error::input(format!("expected mono audio, found {channels} channels")));
    }
    let samples = match (tag, bits) {
        (FORMAT_PCM, 16) => data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0).collect(),
        (FORMAT_FLOAT, 32) => {
            data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
        }
        _ => return Err(Error::input(format!("unsupported WAV encoding (format {tag}, {bits} bits)"))),
    };
    Ok(Waveform::new(samples, sample_rate))
}

pub fn encode_wav(wave: &Waveform, format: SampleFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = wave.len() as u32 * block as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in &wave.samples {
        match format {
            SampleFormat::Pcm16 => {
                let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

/// Read a WAV file and require a given sample rate (no resampling).
pub fn read_wav_at(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate != sample_rate {
        return Err(Error::config(format!(
            "{}: sample rate {} Hz, expected {sample_rate} Hz",
            path.display(),
            w.sample_rate
        )));
    }
    Ok(w)
}

pub fn write_wav(path: &Path, wave: &Waveform, format: SampleFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_wav(wave, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let w = Waveform::new(vec![0.0, 0.25, -0.5, 0.125, 1.0], 16000);
        let back = decode_wav(&encode_wav(&w, SampleFormat::Float32)).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn pcm16_quantises_to_one_lsb() {
        let w = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin() * 0.9).collect(), 16000);
        let back = decode_wav(&encode_wav(&w, SampleFormat::Pcm16)).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_stereo_and_garbage() {
        let mut bytes = encode_wav(&Waveform::zeros(4, 16000), SampleFormat::Pcm16);
        bytes[22] = 2;
        assert!(decode_wav(&bytes).is_err());
        assert!(decode_wav(b"hello").is_err());
    }

    #[test]
    fn sample_rate_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &Waveform::zeros(10, 8000), SampleFormat::Pcm16).unwrap();
        assert!(matches!(read_wav_at(&p, 16000), Err(Error::Config(_))));
        assert_eq!(read_wav_at(&p, 8000).unwrap().len(), 10);
    }
}
