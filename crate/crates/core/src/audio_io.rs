//! Decoding, resampling and length normalization of speech audio.
//!
//! Everything downstream consumes canonical waveforms: 16 kHz mono, a fixed
//! number of samples, amplitudes in [-1, 1].

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_RATE: u32 = 16_000;
pub const MAX_SECONDS: f64 = 10.0;

/// Zero crossings of the sinc kernel kept on each side of the output position.
const SINC_ZERO_CROSSINGS: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::FormatError(msg) => Error::Decode(msg.to_string()),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat("codec not supported by the WAV reader".into())
        }
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Decode("missing data chunk (file truncated before audio data)".into())
        }
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Decode(other.to_string()),
    }
}

/// First of `fmt `/`data` absent from the top-level chunk list.
fn missing_chunk(bytes: &[u8]) -> Option<&'static str> {
    let (mut fmt, mut data) = (false, false);
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        fmt |= id == b"fmt ";
        data |= id == b"data";
        pos = pos.saturating_add(8).saturating_add(len + (len & 1));
    }
    if !fmt {
        Some("fmt")
    } else if !data {
        Some("data")
    } else {
        None
    }
}

/// Decode a RIFF/WAVE byte stream (PCM16 or float32, mono or stereo).
///
/// Stereo is averaged to mono; integer samples are scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::Decode("missing RIFF header (input shorter than 12 bytes)".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::Decode(format!(
            "missing RIFF chunk (found magic {:?})",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    if let Some(missing) = missing_chunk(bytes) {
        return Err(Error::Decode(format!("missing {missing} chunk")));
    }
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels (expected 1 or 2)",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let channels = spec.channels as usize;
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encode as mono 16-bit PCM. Samples are clamped to [-1, 1).
pub fn encode_wav_pcm16(w: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        for &s in &w.samples {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(map_hound)?;
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(w)?)?;
    Ok(())
}

/// Band-limited resampling of a sample sequence by `ratio` = output rate /
/// input rate, producing exactly `out_len` samples.
///
/// Kernel weights are renormalized per output sample, which makes constant
/// signals exact fixed points (including near the edges).
pub(crate) fn resample_by_ratio(samples: &[f64], ratio: f64, out_len: usize) -> Vec<f64> {
    if samples.is_empty() {
        return vec![0.0; out_len];
    }
    let cutoff = ratio.min(1.0);
    let radius = SINC_ZERO_CROSSINGS / cutoff;
    let n = samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 / ratio;
        let lo = ((t - radius).ceil() as isize).max(0);
        let hi = ((t + radius).floor() as isize).min(n - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        // Sinc and window phases advance by fixed steps per tap, so both
        // are carried as rotating (sin, cos) pairs instead of fresh trig calls.
        let d0 = t - lo as f64;
        let (mut sa, mut ca) = (PI * cutoff * d0).sin_cos();
        let (ss, cs) = (PI * cutoff).sin_cos();
        let (mut sb, mut cb) = (PI * (d0 / radius + 1.0)).sin_cos();
        let (sw, cw) = (PI / radius).sin_cos();
        for j in lo..=hi {
            let d = t - j as f64;
            let x = cutoff * d;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { sa / (PI * x) };
            let window = 0.42 - 0.5 * cb + 0.08 * (2.0 * cb * cb - 1.0);
            let wgt = sinc * window;
            acc += wgt * samples[j as usize];
            norm += wgt;
            (sa, ca) = (sa * cs - ca * ss, ca * cs + sa * ss);
            (sb, cb) = (sb * cw - cb * sw, cb * cw + sb * sw);
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    out
}

/// Resample to `target_rate`. Output length is `round(len · target / source)`;
/// an unchanged rate is an exact pass-through.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::config("target_rate", "must be positive"));
    }
    if w.sample_rate == 0 {
        return Err(Error::config("sample_rate", "source rate must be positive"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    Ok(Waveform::new(
        resample_by_ratio(&w.samples, ratio, out_len),
        target_rate,
    ))
}

/// Truncate or zero-pad at the end to exactly `rate · max_seconds` samples.
pub fn pad_or_trim(w: &Waveform, max_seconds: f64) -> Waveform {
    let target = (w.sample_rate as f64 * max_seconds).round() as usize;
    let mut samples = w.samples.clone();
    samples.resize(target, 0.0);
    Waveform::new(samples, w.sample_rate)
}

/// Scale so that the largest magnitude sample is 1. Silence passes through.
pub fn peak_normalize(w: &Waveform) -> Waveform {
    let peak = w.peak();
    if peak == 0.0 {
        return w.clone();
    }
    Waveform::new(w.samples.iter().map(|s| s / peak).collect(), w.sample_rate)
}

/// Decode, resample to 16 kHz and pad/trim: the canonical loading path.
/// Normalization is deferred until after augmentation.
pub fn load_canonical(path: &Path, max_seconds: f64) -> Result<Waveform> {
    let w = read_wav(path)?;
    Ok(pad_or_trim(&resample(&w, CANONICAL_RATE)?, max_seconds))
}
