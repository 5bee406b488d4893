//! Seed-driven training-time augmentation: gain, additive Gaussian noise,
//! pitch shift by resampling, and circular time shift.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_io::{peak_normalize, resample_by_ratio, Waveform};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub gain_db_range: [f64; 2],
    /// Signal-to-noise ratio in dB. `inf` disables the noise.
    pub noise_snr_db_range: [f64; 2],
    pub pitch_factor_range: [f64; 2],
    pub max_shift_fraction: f64,
    pub p_gain: f64,
    pub p_noise: f64,
    pub p_pitch: f64,
    pub p_shift: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain_db_range: [-6.0, 6.0],
            noise_snr_db_range: [15.0, 40.0],
            pitch_factor_range: [0.95, 1.05],
            max_shift_fraction: 0.25,
            p_gain: 0.5,
            p_noise: 0.5,
            p_pitch: 0.5,
            p_shift: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A config that never applies any transform.
    pub fn disabled() -> Self {
        Self {
            p_gain: 0.0,
            p_noise: 0.0,
            p_pitch: 0.0,
            p_shift: 0.0,
            ..Self::default()
        }
    }

    /// True when no transform can fire.
    pub fn is_identity(&self) -> bool {
        [self.p_gain, self.p_noise, self.p_pitch, self.p_shift]
            .iter()
            .all(|&p| p <= 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("augment.gain_db_range", self.gain_db_range),
            ("augment.noise_snr_db_range", self.noise_snr_db_range),
            ("augment.pitch_factor_range", self.pitch_factor_range),
        ];
        for (field, [lo, hi]) in ranges {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::config(field, format!("invalid range [{lo}, {hi}]")));
            }
        }
        let [plo, phi] = self.pitch_factor_range;
        if plo <= 0.5 || phi >= 2.0 {
            return Err(Error::config(
                "augment.pitch_factor_range",
                "factors must lie in (0.5, 2.0)",
            ));
        }
        if !(0.0..=1.0).contains(&self.max_shift_fraction) {
            return Err(Error::config("augment.max_shift_fraction", "must be in [0, 1]"));
        }
        for (field, p) in [
            ("augment.p_gain", self.p_gain),
            ("augment.p_noise", self.p_noise),
            ("augment.p_pitch", self.p_pitch),
            ("augment.p_shift", self.p_shift),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn apply_gain(w: &Waveform, gain_db: f64) -> Waveform {
    let g = 10f64.powf(gain_db / 20.0);
    Waveform::new(w.samples.iter().map(|s| s * g).collect(), w.sample_rate)
}

/// Add white Gaussian noise at the requested SNR (powers are mean squares).
/// An infinite SNR returns the input unchanged.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    w: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if snr_db == f64::INFINITY {
        return Ok(w.clone());
    }
    let p_signal = w.power();
    if p_signal == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot set an SNR on an all-zero (or empty) signal".into(),
        ));
    }
    let std = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let samples = w
        .samples
        .iter()
        .map(|s| {
            let n: f64 = rng.sample(StandardNormal);
            s + std * n
        })
        .collect();
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Resample by `factor`, reinterpret at the original rate and pad/trim back
/// to the original length. Frequencies are multiplied by `factor`.
pub fn pitch_shift_by_resample(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(Error::config(
            "pitch_factor",
            format!("{factor} outside (0.5, 2.0)"),
        ));
    }
    let len = w.len();
    let shifted_len = (len as f64 / factor).round() as usize;
    let mut samples = resample_by_ratio(&w.samples, 1.0 / factor, shifted_len);
    samples.resize(len, 0.0);
    Ok(Waveform::new(samples, w.sample_rate))
}

/// `out[i] = in[(i - shift) mod len]`.
pub fn time_shift_circular(w: &Waveform, shift: i64) -> Waveform {
    let n = w.len();
    if n == 0 {
        return w.clone();
    }
    let k = shift.rem_euclid(n as i64) as usize;
    let mut samples = w.samples.clone();
    samples.rotate_right(k);
    Waveform::new(samples, w.sample_rate)
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

/// Full training-time augmentation of one sample: gain → noise → pitch →
/// shift (each with its own probability), then peak normalization.
///
/// The random stream is derived from `(cfg.seed, sample_index, epoch)` only,
/// so the output does not depend on evaluation order or thread count.
pub fn augment_pipeline(
    w: &Waveform,
    cfg: &AugmentConfig,
    sample_index: u64,
    epoch: u64,
) -> Result<Waveform> {
    let mut rng = rng::stream(&[purpose::AUGMENT, cfg.seed, sample_index, epoch]);
    let mut out = w.clone();

    // Decisions and parameters are always drawn so that the stream layout
    // does not depend on which transforms fire.
    let fire_gain = rng.random::<f64>() < cfg.p_gain;
    let gain = draw(&mut rng, cfg.gain_db_range);
    if fire_gain {
        out = apply_gain(&out, gain);
    }

    let fire_noise = rng.random::<f64>() < cfg.p_noise;
    let snr = draw(&mut rng, cfg.noise_snr_db_range);
    let noise_seed: u64 = rng.random();
    if fire_noise {
        let mut noise_rng = rng::stream(&[purpose::AUGMENT, noise_seed]);
        out = add_gaussian_noise(&out, snr, &mut noise_rng)?;
    }

    let fire_pitch = rng.random::<f64>() < cfg.p_pitch;
    let factor = draw(&mut rng, cfg.pitch_factor_range);
    if fire_pitch && factor != 1.0 {
        out = pitch_shift_by_resample(&out, factor)?;
    }

    let fire_shift = rng.random::<f64>() < cfg.p_shift;
    let max_shift = (cfg.max_shift_fraction * out.len() as f64).floor() as i64;
    let shift = if max_shift > 0 {
        rng.random_range(-max_shift..=max_shift)
    } else {
        0
    };
    if fire_shift {
        out = time_shift_circular(&out, shift);
    }

    Ok(peak_normalize(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::pad_or_trim;

    fn sine(freq: f64, rate: u32, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
    }

    #[test]
    fn gain_values() {
        let w = Waveform::new(vec![0.1, -0.3], 16000);
        assert_eq!(apply_gain(&w, 0.0), w);
        // 10^(6/20) = 1.9952623149688795
        let up = apply_gain(&Waveform::new(vec![0.1], 16000), 6.0);
        assert!((up.samples[0] - 0.199_526_231_496_887_95).abs() < 1e-12);
        // 10^(-6/20) = 0.5011872336272722
        let down = apply_gain(&Waveform::new(vec![0.2], 16000), -6.0);
        assert!((down.samples[0] - 0.100_237_446_725_454_44).abs() < 1e-12);
    }

    #[test]
    fn infinite_snr_is_identity_and_silence_is_degenerate() {
        let w = sine(100.0, 16000, 100);
        let mut r = rng::stream(&[1]);
        assert_eq!(add_gaussian_noise(&w, f64::INFINITY, &mut r).unwrap(), w);
        let z = Waveform::new(vec![0.0; 10], 16000);
        assert!(matches!(
            add_gaussian_noise(&z, 20.0, &mut r),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn noise_power_matches_snr() {
        // unit-power signal: constant ±1 square wave
        let w = Waveform::new(
            (0..160_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            16000,
        );
        let mut r = rng::stream(&[7]);
        let noisy = add_gaussian_noise(&w, 20.0, &mut r).unwrap();
        let p_noise: f64 = noisy
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        assert!((p_noise - 0.01).abs() / 0.01 < 0.05, "{p_noise}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let w = sine(300.0, 16000, 1000);
        let a = add_gaussian_noise(&w, 10.0, &mut rng::stream(&[3])).unwrap();
        let b = add_gaussian_noise(&w, 10.0, &mut rng::stream(&[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pitch_shift_preserves_length_and_rejects_bad_factors() {
        let w = sine(440.0, 16000, 16000);
        for f in [0.9, 0.95, 1.0, 1.05, 1.3] {
            assert_eq!(pitch_shift_by_resample(&w, f).unwrap().len(), w.len());
        }
        assert!(pitch_shift_by_resample(&w, 0.5).is_err());
        assert!(pitch_shift_by_resample(&w, 2.0).is_err());
        let same = pitch_shift_by_resample(&w, 1.0).unwrap();
        let corr = correlation(&same.samples, &w.samples);
        assert!(corr >= 0.999, "{corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn circular_shift_cases() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], 16000);
        assert_eq!(time_shift_circular(&w, 0), w);
        assert_eq!(time_shift_circular(&w, 5), w);
        assert_eq!(time_shift_circular(&time_shift_circular(&w, 3), -3), w);
        assert_eq!(time_shift_circular(&w, 1).samples, vec![5.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(time_shift_circular(&w, -1).samples, vec![2.0, 3.0, 4.0, 5.0, 1.0]);
    }

    #[test]
    fn pipeline_disabled_is_just_normalization() {
        let w = pad_or_trim(&sine(200.0, 16000, 8000), 1.0);
        let w = apply_gain(&w, -10.0);
        let out = augment_pipeline(&w, &AugmentConfig::disabled(), 3, 0).unwrap();
        assert_eq!(out, peak_normalize(&w));
    }

    #[test]
    fn pipeline_identity_parameters() {
        let w = apply_gain(&sine(200.0, 16000, 4000), -3.0);
        let cfg = AugmentConfig {
            gain_db_range: [0.0, 0.0],
            noise_snr_db_range: [f64::INFINITY, f64::INFINITY],
            pitch_factor_range: [1.0, 1.0],
            max_shift_fraction: 0.0,
            p_gain: 1.0,
            p_noise: 1.0,
            p_pitch: 1.0,
            p_shift: 1.0,
            seed: 9,
        };
        let out = augment_pipeline(&w, &cfg, 0, 0).unwrap();
        let reference = peak_normalize(&w);
        for (a, b) in out.samples.iter().zip(&reference.samples) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_seed_sensitive() {
        let w = sine(250.0, 16000, 8000);
        let cfg = AugmentConfig {
            p_gain: 1.0,
            p_noise: 1.0,
            p_pitch: 1.0,
            p_shift: 1.0,
            seed: 42,
            ..AugmentConfig::default()
        };
        let a = augment_pipeline(&w, &cfg, 5, 2).unwrap();
        let b = augment_pipeline(&w, &cfg, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), w.len());
        let c = augment_pipeline(&w, &cfg, 5, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            gain_db_range: [3.0, -3.0],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            p_noise: 1.5,
            ..AugmentConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "augment.p_noise"),
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gain_composes_additively(a in -20.0f64..20.0, b in -20.0f64..20.0,
                                        xs in proptest::collection::vec(-1.0f64..1.0, 1..64)) {
                let w = Waveform::new(xs, 16000);
                let once = apply_gain(&w, a + b);
                let twice = apply_gain(&apply_gain(&w, a), b);
                for (x, y) in once.samples.iter().zip(&twice.samples) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }

            #[test]
            fn transforms_preserve_length(n in 1usize..2000, shift in -5000i64..5000,
                                          factor in 0.9f64..1.1, seed in 0u64..1000) {
                let w = Waveform::new((0..n).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.4).collect(), 16000);
                prop_assert_eq!(time_shift_circular(&w, shift).len(), n);
                prop_assert_eq!(pitch_shift_by_resample(&w, factor).unwrap().len(), n);
                prop_assert_eq!(apply_gain(&w, 3.0).len(), n);
                let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
                prop_assert_eq!(augment_pipeline(&w, &cfg, 0, 0).unwrap().len(), n);
            }

            #[test]
            fn peak_normalize_is_idempotent(xs in proptest::collection::vec(-3.0f64..3.0, 1..64)) {
                let w = Waveform::new(xs, 16000);
                let once = peak_normalize(&w);
                prop_assert_eq!(peak_normalize(&once), once);
            }
        }
    }
}
