use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{FrontendConfig, MelFilterbank, Waveform};
use crate::error::{Error, Result};

/// Log mel filter-bank energies, `n_mels × n_frames`, mel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub config: FrontendConfig,
}

impl FeatureMatrix {
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f32] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] - alpha * x[n-1]`.
pub fn pre_emphasize(w: &Waveform, alpha: f64) -> Waveform {
    let x = &w.samples;
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    y.extend(x.windows(2).map(|p| (p[1] as f64 - alpha * p[0] as f64) as f32));
    Waveform::new(y, w.sample_rate)
}

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Splits `w` into Hamming-windowed frames.
///
/// The signal is right-padded with `win - step` zeros so a `T`-sample input
/// yields exactly `floor(T / step)` full frames.
pub fn frame_and_window(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let (win, step) = (cfg.win_samples(), cfg.step_samples());
    if w.len() < win {
        return Err(Error::TooShort { len: w.len(), needed: win });
    }
    let window = hamming(win);
    let n_frames = cfg.frames_for(w.len());
    let frames = (0..n_frames)
        .map(|t| {
            let start = t * step;
            (0..win)
                .map(|i| {
                    let s = w.samples.get(start + i).copied().unwrap_or(0.0);
                    s as f64 * window[i]
                })
                .collect()
        })
        .collect();
    Ok(frames)
}

/// Reusable FFT plan producing one-sided power spectra.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrumAnalyzer").field("n_fft", &self.n_fft).finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(n_fft: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self { n_fft, fft }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// `|FFT_k|²` for `k = 0..=n_fft/2`, zero-padding `frame` to `n_fft`.
    pub fn power(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        assert!(frame.len() <= self.n_fft, "frame longer than n_fft");
        buf.clear();
        buf.extend(frame.iter().map(|&x| Complex::new(x, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm_sqr();
        }
    }
}

/// One-shot power spectrum of a single frame.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let analyzer = SpectrumAnalyzer::new(n_fft);
    let mut out = vec![0.0; n_fft / 2 + 1];
    analyzer.power(frame, &mut Vec::with_capacity(n_fft), &mut out);
    out
}

/// Front-end with a prebuilt filterbank and FFT plan. Immutable and shareable
/// across threads.
#[derive(Debug, Clone)]
pub struct Frontend {
    cfg: FrontendConfig,
    filterbank: MelFilterbank,
    analyzer: SpectrumAnalyzer,
}

impl Frontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        let filterbank = MelFilterbank::new(cfg, cfg.sample_rate)?;
        Ok(Self { cfg: cfg.clone(), filterbank, analyzer: SpectrumAnalyzer::new(cfg.n_fft) })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Log filter-bank energies followed by per-utterance mean normalization
    /// of each coefficient.
    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {} Hz, expected {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let emphasized = pre_emphasize(w, self.cfg.preemph);
        let frames = frame_and_window(&emphasized, &self.cfg)?;
        let (n_mels, n_frames) = (self.cfg.n_mels, frames.len());

        let mut logmel = vec![0f64; n_mels * n_frames];
        let mut buf = Vec::with_capacity(self.cfg.n_fft);
        let mut power = vec![0.0; self.cfg.n_bins()];
        let mut energies = vec![0.0; n_mels];
        for (t, frame) in frames.iter().enumerate() {
            self.analyzer.power(frame, &mut buf, &mut power);
            self.filterbank.apply(&power, &mut energies);
            for (m, &e) in energies.iter().enumerate() {
                logmel[m * n_frames + t] = e.max(self.cfg.log_floor).ln();
            }
        }

        let mut values = Vec::with_capacity(n_mels * n_frames);
        for row in logmel.chunks(n_frames) {
            let first = row[0];
            let mean = first + row.iter().map(|&v| v - first).sum::<f64>() / n_frames as f64;
            values.extend(row.iter().map(|&v| (v - mean) as f32));
        }
        Ok(FeatureMatrix { values, n_mels, n_frames, config: self.cfg.clone() })
    }
}

pub fn extract_mfbe(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(cfg)?.extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(), 16000)
    }

    #[test]
    fn pre_emphasis_cases() {
        let w = Waveform::new(vec![1.0, 1.0, 1.0], 16000);
        let y = pre_emphasize(&w, 0.97);
        assert_eq!(y.samples[0], 1.0);
        assert!((y.samples[1] - 0.03).abs() < 1e-6 && (y.samples[2] - 0.03).abs() < 1e-6);

        let r = random_wave(1000, 3);
        assert_eq!(pre_emphasize(&r, 0.0), r);

        let y = pre_emphasize(&r, 0.97);
        let mut naive = vec![0f32; r.len()];
        for n in 0..r.len() {
            naive[n] =
                if n == 0 { r.samples[0] } else { (r.samples[n] as f64 - 0.97 * r.samples[n - 1] as f64) as f32 };
        }
        assert_eq!(y.samples, naive);
    }

    #[test]
    fn framing_counts_and_window() {
        let cfg = FrontendConfig::default();
        let two_s = Waveform::new(vec![0.1; 32000], 16000);
        assert_eq!(frame_and_window(&two_s, &cfg).unwrap().len(), 200);
        let four_s = Waveform::new(vec![0.1; 64000], 16000);
        assert_eq!(frame_and_window(&four_s, &cfg).unwrap().len(), 400);

        let h = hamming(400);
        assert!((h[0] - 0.08).abs() < 1e-12 && (h[399] - 0.08).abs() < 1e-12);

        let short = Waveform::new(vec![0.0; 399], 16000);
        assert!(matches!(frame_and_window(&short, &cfg), Err(Error::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn frame_count_is_floor(len in 400usize..6000) {
            let cfg = FrontendConfig::default();
            let w = Waveform::new(vec![0.5; len], 16000);
            let frames = frame_and_window(&w, &cfg).unwrap();
            prop_assert_eq!(frames.len(), len / 160);
            prop_assert!(frames.iter().all(|f| f.len() == 400));
        }
    }

    fn naive_dft_power(x: &[f64], n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn power_spectrum_cases() {
        assert!(power_spectrum(&[0.0; 400], 512).iter().all(|&p| p == 0.0));

        let k0 = 37;
        let cosine: Vec<f64> = (0..512).map(|n| (2.0 * PI * (k0 * n) as f64 / 512.0).cos()).collect();
        let p = power_spectrum(&cosine, 512);
        assert!((p[k0] - 256.0 * 256.0).abs() < 1e-6);
        let leak: f64 = p.iter().enumerate().filter(|(k, _)| *k != k0).map(|(_, v)| v).sum();
        assert!(leak < 1e-12 * p[k0]);

        // Parseval against a naive DFT over the full (two-sided) spectrum
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = naive_dft_power(&frame, 512);
        let time_energy: f64 = frame.iter().map(|x| x * x).sum();
        assert!((time_energy - full.iter().sum::<f64>() / 512.0).abs() < 1e-9 * time_energy);
        let fast = power_spectrum(&frame, 512);
        for k in 0..=256 {
            assert!((fast[k] - full[k]).abs() < 1e-8 * (1.0 + full[k]));
        }
    }

    #[test]
    fn mfbe_shape_and_cmn() {
        let w = random_wave(32000, 5);
        let f = extract_mfbe(&w, &FrontendConfig::default()).unwrap();
        assert_eq!((f.n_mels, f.n_frames), (40, 200));
        assert!(f.values.iter().all(|v| v.is_finite()));
        for m in 0..40 {
            let mean = f.row(m).iter().map(|&v| v as f64).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-6, "row {m} mean {mean}");
        }
    }

    #[test]
    fn silence_is_zero_after_cmn() {
        let w = Waveform::new(vec![0.0; 32000], 16000);
        let f = extract_mfbe(&w, &FrontendConfig::default()).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn explicit_full_band_equals_default() {
        let w = random_wave(20000, 9);
        let a = extract_mfbe(&w, &FrontendConfig::default()).unwrap();
        let b = extract_mfbe(&w, &FrontendConfig::band(20.0, 8000.0)).unwrap();
        assert_eq!(a.values, b.values);
        let c = extract_mfbe(&w, &FrontendConfig::default()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let w = Waveform::new(vec![0.0; 16000], 8000);
        assert!(matches!(extract_mfbe(&w, &FrontendConfig::default()), Err(Error::UnsupportedFormat(_))));
    }
}
