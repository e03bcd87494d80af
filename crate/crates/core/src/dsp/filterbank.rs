use crate::dsp::FrontendConfig;
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters confined to `[f_min, f_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    center_freqs: Vec<f64>,
    /// Lower and upper corner of each triangle, Hz.
    corners: Vec<(f64, f64)>,
    bin_hz: f64,
}

impl MelFilterbank {
    /// Builds `cfg.n_mels` triangles whose corners sit on equally spaced mel
    /// points between `mel(f_min)` and `mel(f_max)`.
    ///
    /// A triangle too narrow to contain any FFT bin falls back to a unit
    /// weight on the in-band bin nearest its center, so every row is
    /// non-empty.
    pub fn new(cfg: &FrontendConfig, sample_rate: u32) -> Result<Self> {
        let cfg = FrontendConfig { sample_rate, ..cfg.clone() };
        cfg.validate()?;
        let n_mels = cfg.n_mels;
        let n_bins = cfg.n_bins();
        let bin_hz = sample_rate as f64 / cfg.n_fft as f64;

        let in_band: Vec<usize> = (0..n_bins)
            .filter(|&k| {
                let f = k as f64 * bin_hz;
                f >= cfg.f_min && f <= cfg.f_max
            })
            .collect();
        if in_band.is_empty() {
            return Err(Error::BadRange {
                f_min: cfg.f_min,
                f_max: cfg.f_max,
                reason: "range contains no FFT bin".into(),
            });
        }

        let (mel_lo, mel_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let mut hz: Vec<f64> =
            (0..n_mels + 2).map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64)).collect();
        // pin the outer corners so round-off cannot leak past the band
        hz[0] = cfg.f_min;
        hz[n_mels + 1] = cfg.f_max;

        let mut weights = vec![0.0; n_mels * n_bins];
        let mut corners = Vec::with_capacity(n_mels);
        let mut center_freqs = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, c, hi) = (hz[m], hz[m + 1], hz[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            let mut any = false;
            for &k in &in_band {
                let f = k as f64 * bin_hz;
                if f <= lo || f >= hi {
                    continue;
                }
                let w = if f <= c { (f - lo) / (c - lo) } else { (hi - f) / (hi - c) };
                if w > 0.0 {
                    row[k] = w;
                    any = true;
                }
            }
            if !any {
                let nearest = in_band
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = (a as f64 * bin_hz - c).abs();
                        let db = (b as f64 * bin_hz - c).abs();
                        da.total_cmp(&db)
                    })
                    .expect("in_band is non-empty");
                row[nearest] = 1.0;
            }
            corners.push((lo, hi));
            center_freqs.push(c);
        }

        Ok(Self { n_mels, n_bins, weights, center_freqs, corners, bin_hz })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.bin_hz
    }

    /// Width `hi - lo` of each triangle in Hz.
    pub fn bandwidths_hz(&self) -> Vec<f64> {
        self.corners.iter().map(|(lo, hi)| hi - lo).collect()
    }

    /// Filter energies `W · power` for one frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}
