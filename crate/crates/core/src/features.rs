//! Short-time Fourier transform, HTK log-Mel spectrogram and MFCC.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mfcc: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 160,
            fft_size: 1024,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            n_mfcc: 40,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, rate: u32) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_length {
            return Err(Error::config("features.hop", "need 0 < hop <= frame_length"));
        }
        if self.frame_length > self.fft_size {
            return Err(Error::config(
                "features.frame_length",
                "frame_length must not exceed fft_size",
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= rate as f64 / 2.0) {
            return Err(Error::config(
                "features.fmax",
                format!("need 0 <= fmin < fmax <= {}", rate as f64 / 2.0),
            ));
        }
        if self.n_mels == 0 {
            return Err(Error::config("features.n_mels", "must be positive"));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::config("features.n_mfcc", "need 1 <= n_mfcc <= n_mels"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("features.log_floor", "must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Non-centered frame count, or `None` when the signal is shorter than a frame.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_length).then(|| 1 + (len - self.frame_length) / self.hop)
    }

    /// Stable content hash, used to key feature caches.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("feature config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(12)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinAxis {
    HzLinear,
    Mel,
    Mfcc,
}

/// Real time × frequency (or coefficient) matrix, row-major by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub frame_rate: f64,
    pub axis: BinAxis,
}

/// MFCC output shares the spectrogram layout.
pub type FeatureMatrix = Spectrogram;

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    /// Round every entry to single precision (features are stored as f32).
    pub fn to_f32_precision(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Vec<Complex64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub frame_rate: f64,
}

impl ComplexSpectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.n_bins + bin]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular HTK filterbank, `n_mels × (fft_size/2 + 1)` row-major.
pub fn mel_filterbank(cfg: &FeatureConfig, rate: u32) -> Result<Vec<f64>> {
    cfg.validate(rate)?;
    let n_bins = cfg.n_bins();
    let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = rate as f64 / cfg.fft_size as f64;
    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::config(
                "features.n_mels",
                format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                     reduce n_mels or raise fft_size"
                ),
            ));
        }
    }
    Ok(fb)
}

/// Orthonormal DCT-II basis, `n_out × n_in` row-major.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for n in 0..n_in {
            m[k * n_in + n] = scale
                * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    m
}

/// Precomputed window, FFT plan, filterbank and DCT basis for one config.
/// Cheap to share across threads.
#[derive(Clone)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    rate: u32,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Vec<f64>,
    dct: Vec<f64>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("cfg", &self.cfg)
            .field("rate", &self.rate)
            .finish()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig, rate: u32) -> Result<Self> {
        cfg.validate(rate)?;
        let filterbank = mel_filterbank(cfg, rate)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            rate,
            window: hann_window(cfg.frame_length),
            fft,
            filterbank,
            dct: dct_matrix(cfg.n_mfcc, cfg.n_mels),
        })
    }

    pub fn canonical(cfg: &FeatureConfig) -> Result<Self> {
        Self::new(cfg, CANONICAL_RATE)
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.rate {
            return Err(Error::config(
                "sample_rate",
                format!("extractor built for {} Hz, got {} Hz", self.rate, w.sample_rate),
            ));
        }
        Ok(())
    }

    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        self.check_rate(w)?;
        let cfg = &self.cfg;
        let n_frames = cfg.n_frames(w.len()).ok_or_else(|| {
            Error::Framing(format!(
                "signal of {} samples is shorter than one frame ({})",
                w.len(),
                cfg.frame_length
            ))
        })?;
        let n_bins = cfg.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..n_frames {
            let start = f * cfg.hop;
            buf.fill(Complex64::new(0.0, 0.0));
            for (i, (s, win)) in w.samples[start..start + cfg.frame_length]
                .iter()
                .zip(&self.window)
                .enumerate()
            {
                buf[i] = Complex64::new(s * win, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..n_bins]);
        }
        Ok(ComplexSpectrogram {
            data,
            n_frames,
            n_bins,
            frame_rate: self.rate as f64 / cfg.hop as f64,
        })
    }

    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        let s = self.stft(w)?;
        Ok(Spectrogram {
            data: s.data.iter().map(|c| c.norm_sqr()).collect(),
            n_frames: s.n_frames,
            n_bins: s.n_bins,
            frame_rate: s.frame_rate,
            axis: BinAxis::HzLinear,
        })
    }

    /// `log(max(filterbank · |stft|², log_floor))`, shape frames × n_mels.
    pub fn log_mel(&self, w: &Waveform) -> Result<Spectrogram> {
        let power = self.power_spectrogram(w)?;
        let n_mels = self.cfg.n_mels;
        let n_bins = power.n_bins;
        let mut data = vec![0.0; power.n_frames * n_mels];
        // frames × bins  ·  (mels × bins)ᵀ
        unsafe {
            matrixmultiply::dgemm(
                power.n_frames,
                n_bins,
                n_mels,
                1.0,
                power.data.as_ptr(),
                n_bins as isize,
                1,
                self.filterbank.as_ptr(),
                1,
                n_bins as isize,
                0.0,
                data.as_mut_ptr(),
                n_mels as isize,
                1,
            );
        }
        let floor = self.cfg.log_floor;
        for v in &mut data {
            *v = v.max(floor).ln();
        }
        Ok(Spectrogram {
            data,
            n_frames: power.n_frames,
            n_bins: n_mels,
            frame_rate: power.frame_rate,
            axis: BinAxis::Mel,
        })
    }

    /// Apply the orthonormal DCT-II along the mel axis of a log-Mel matrix.
    pub fn cepstrum(&self, log_mel: &Spectrogram) -> Result<FeatureMatrix> {
        if log_mel.n_bins != self.cfg.n_mels {
            return Err(Error::Shape(format!(
                "log-mel has {} bins, expected {}",
                log_mel.n_bins, self.cfg.n_mels
            )));
        }
        let (n_mels, n_mfcc) = (self.cfg.n_mels, self.cfg.n_mfcc);
        let mut data = Vec::with_capacity(log_mel.n_frames * n_mfcc);
        for f in 0..log_mel.n_frames {
            let frame = log_mel.frame(f);
            for k in 0..n_mfcc {
                let basis = &self.dct[k * n_mels..(k + 1) * n_mels];
                data.push(basis.iter().zip(frame).map(|(b, x)| b * x).sum());
            }
        }
        Ok(FeatureMatrix {
            data,
            n_frames: log_mel.n_frames,
            n_bins: n_mfcc,
            frame_rate: log_mel.frame_rate,
            axis: BinAxis::Mfcc,
        })
    }

    pub fn mfcc(&self, w: &Waveform) -> Result<FeatureMatrix> {
        self.cepstrum(&self.log_mel(w)?)
    }
}

pub fn stft(w: &Waveform, cfg: &FeatureConfig) -> Result<ComplexSpectrogram> {
    FeatureExtractor::new(cfg, w.sample_rate)?.stft(w)
}

pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    FeatureExtractor::new(cfg, w.sample_rate)?.log_mel(w)
}

pub fn mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    FeatureExtractor::new(cfg, w.sample_rate)?.mfcc(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut r = crate::rng::stream(&[seed]);
        Waveform::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), 16000)
    }

    #[test]
    fn mel_scale_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        // 2595 · log10(1 + 1000/700) = 999.98553...
        assert!((hz_to_mel(1000.0) - 999.985_537_139_624_4).abs() < 1e-9);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let cfg = FeatureConfig::default();
        let fb = mel_filterbank(&cfg, 16000).unwrap();
        let n_bins = cfg.n_bins();
        assert_eq!(fb.len(), cfg.n_mels * n_bins);
        assert!(fb.iter().all(|&w| w >= 0.0));
        let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let bin_hz = 16000.0 / cfg.fft_size as f64;
        for m in 0..cfg.n_mels {
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            assert!(row.iter().any(|&w| w > 0.0));
            let center = mel_to_hz(mlo + (mhi - mlo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64);
            let argmax = (0..n_bins)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            // peak sits on the bin nearest the filter center
            assert!((argmax as f64 * bin_hz - center).abs() <= bin_hz, "filter {m}");
        }
    }

    #[test]
    fn too_many_mels_is_a_config_error() {
        let cfg = FeatureConfig {
            fft_size: 512,
            ..FeatureConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&cfg, 16000),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn dc_signal_concentrates_in_bin_zero() {
        // frame == fft size so the periodic Hann window is exactly periodic:
        // its spectrum is nonzero only in bins 0 and 1
        let cfg = FeatureConfig {
            frame_length: 1024,
            hop: 256,
            ..FeatureConfig::default()
        };
        let w = Waveform::new(vec![0.3; 4000], 16000);
        let s = stft(&w, &cfg).unwrap();
        let wsum: f64 = hann_window(cfg.frame_length).iter().sum();
        for f in 0..s.n_frames {
            let dc = s.get(f, 0).norm();
            assert!((dc - 0.3 * wsum).abs() < 1e-9);
            assert!((s.get(f, 1).norm() - 0.5 * dc).abs() < 1e-9);
            for k in 2..s.n_bins {
                assert!(s.get(f, k).norm() <= 1e-9 * dc, "bin {k}");
            }
        }
        // zero-padded default framing still puts the maximum in bin 0
        let s = stft(&w, &FeatureConfig::default()).unwrap();
        let dc = s.get(0, 0).norm();
        assert!((dc - 0.3 * hann_window(400).iter().sum::<f64>()).abs() < 1e-9);
        assert!((1..s.n_bins).all(|k| s.get(0, k).norm() < dc));
    }

    #[test]
    fn framing_errors_and_frame_counts() {
        let cfg = FeatureConfig::default();
        assert!(matches!(
            stft(&Waveform::new(vec![0.0; 399], 16000), &cfg),
            Err(Error::Framing(_))
        ));
        assert_eq!(cfg.n_frames(160_000), Some(998));
        assert_eq!(cfg.n_frames(400), Some(1));
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = FeatureConfig::default();
        let w = noise(2000, 4);
        let s = stft(&w, &cfg).unwrap();
        let win = hann_window(cfg.frame_length);
        let n = cfg.fft_size as f64;
        for f in 0..s.n_frames {
            let time: f64 = (0..cfg.frame_length)
                .map(|i| (w.samples[f * cfg.hop + i] * win[i]).powi(2))
                .sum();
            let mut freq = 0.0;
            for k in 0..s.n_bins {
                let e = s.get(f, k).norm_sqr();
                freq += if k == 0 || k == s.n_bins - 1 { e } else { 2.0 * e };
            }
            assert!(((freq / n) - time).abs() <= 1e-6 * time);
        }
    }

    #[test]
    fn silence_hits_the_floor_and_scaling_shifts_by_log4() {
        let cfg = FeatureConfig::default();
        let silent = log_mel(&Waveform::new(vec![0.0; 1600], 16000), &cfg).unwrap();
        assert!(silent.data.iter().all(|&v| v == cfg.log_floor.ln()));

        let w = noise(4000, 11);
        let doubled = Waveform::new(w.samples.iter().map(|s| 2.0 * s).collect(), 16000);
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&doubled, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - x - 4f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn ten_second_log_mel_shape() {
        let s = log_mel(&Waveform::new(vec![0.01; 160_000], 16000), &FeatureConfig::default())
            .unwrap();
        assert_eq!((s.n_frames, s.n_bins), (998, 128));
        assert_eq!(s.axis, BinAxis::Mel);
    }

    #[test]
    fn dct_is_orthonormal_and_constant_maps_to_c0() {
        let n = 128;
        let d = dct_matrix(n, n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| d[i * n + k] * d[j * n + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9);
            }
        }
        let fx = FeatureExtractor::canonical(&FeatureConfig::default()).unwrap();
        let c = -2.5;
        let lm = Spectrogram {
            data: vec![c; 128],
            n_frames: 1,
            n_bins: 128,
            frame_rate: 100.0,
            axis: BinAxis::Mel,
        };
        let m = fx.cepstrum(&lm).unwrap();
        assert!((m.data[0] - c * (128f64).sqrt()).abs() < 1e-9);
        assert!(m.data[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn features_are_deterministic() {
        let w = noise(6000, 2);
        let cfg = FeatureConfig::default();
        assert_eq!(mfcc(&w, &cfg).unwrap(), mfcc(&w, &cfg).unwrap());
        assert_eq!(log_mel(&w, &cfg).unwrap(), log_mel(&w, &cfg).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn shapes_depend_only_on_length(len in 400usize..6000) {
                let cfg = FeatureConfig::default();
                let fx = FeatureExtractor::canonical(&cfg).unwrap();
                let w = noise(len, len as u64);
                let lm = fx.log_mel(&w).unwrap();
                let mf = fx.mfcc(&w).unwrap();
                let frames = 1 + (len - 400) / 160;
                prop_assert_eq!((lm.n_frames, lm.n_bins), (frames, 128));
                prop_assert_eq!((mf.n_frames, mf.n_bins), (frames, 40));
                prop_assert!(lm.data.iter().all(|v| v.is_finite()));
            }
        }
    }
}
