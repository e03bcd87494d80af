//! Front-end: waveform framing, power spectra and log mel filter-bank
//! energies restricted to a selectable frequency sub-band.

mod features;
mod filterbank;
pub mod wav;

pub use features::{
    extract_mfbe, frame_and_window, hamming, power_spectrum, pre_emphasize, FeatureMatrix, Frontend, SpectrumAnalyzer,
};
pub use filterbank::{hz_to_mel, mel_to_hz, MelFilterbank};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sample rate of every pipeline input.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub win_ms: u32,
    pub step_ms: u32,
    pub n_fft: usize,
    pub preemph: f64,
    pub log_floor: f64,
    pub sample_rate: u32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            f_min: 20.0,
            f_max: 8000.0,
            win_ms: 25,
            step_ms: 10,
            n_fft: 512,
            preemph: 0.97,
            log_floor: 1e-10,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl FrontendConfig {
    /// Default configuration restricted to the band `[f_min, f_max]`.
    pub fn band(f_min: f64, f_max: f64) -> Self {
        Self { f_min, f_max, ..Self::default() }
    }

    pub fn win_samples(&self) -> usize {
        (self.sample_rate as usize * self.win_ms as usize) / 1000
    }

    pub fn step_samples(&self) -> usize {
        (self.sample_rate as usize * self.step_ms as usize) / 1000
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a waveform of `n_samples` samples.
    pub fn frames_for(&self, n_samples: usize) -> usize {
        n_samples / self.step_samples()
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min.is_finite() && self.f_max.is_finite())
            || self.f_min < 0.0
            || self.f_min >= self.f_max
            || self.f_max > nyquist
        {
            return Err(Error::BadRange {
                f_min: self.f_min,
                f_max: self.f_max,
                reason: format!("need 0 <= f_min < f_max <= {nyquist}"),
            });
        }
        if self.n_mels < 2 {
            return Err(Error::InvalidConfig(format!("n_mels must be >= 2, got {}", self.n_mels)));
        }
        let (win, step) = (self.win_samples(), self.step_samples());
        if step == 0 || win < step {
            return Err(Error::InvalidConfig(format!(
                "window ({win} samples) must be at least one step ({step} samples)"
            )));
        }
        if self.n_fft < win {
            return Err(Error::InvalidConfig(format!("n_fft {} is shorter than the {win}-sample window", self.n_fft)));
        }
        if !(0.0..1.0).contains(&self.preemph) {
            return Err(Error::InvalidConfig(format!("preemph {} not in [0, 1)", self.preemph)));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of every field that influences the features.
    pub fn fingerprint(&self) -> u64 {
        let canon = format!(
            "n_mels={};f_min={:?};f_max={:?};win_ms={};step_ms={};n_fft={};preemph={:?};log_floor={:?};sr={}",
            self.n_mels,
            self.f_min,
            self.f_max,
            self.win_ms,
            self.step_ms,
            self.n_fft,
            self.preemph,
            self.log_floor,
            self.sample_rate
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_full_band() {
        let d = FrontendConfig::default();
        assert_eq!(d, FrontendConfig::band(20.0, 8000.0));
        assert_eq!(d.win_samples(), 400);
        assert_eq!(d.step_samples(), 160);
        assert_eq!(d.fingerprint(), FrontendConfig::band(20.0, 8000.0).fingerprint());
        assert_ne!(d.fingerprint(), FrontendConfig::band(20.0, 2000.0).fingerprint());
    }

    #[test]
    fn rejects_bad_ranges() {
        for (lo, hi) in [(2000.0, 2000.0), (3000.0, 1000.0), (20.0, 8001.0), (-1.0, 100.0)] {
            assert!(matches!(FrontendConfig::band(lo, hi).validate(), Err(Error::BadRange { .. })));
        }
        assert!(FrontendConfig::band(0.0, 8000.0).validate().is_ok());
    }
}
