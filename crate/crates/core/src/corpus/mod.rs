//! Deterministic synthetic speakers, manifests and trial lists.
//!
//! Each speaker has a fundamental frequency with eight harmonic amplitudes
//! (identity cues below ~2.4 kHz) and two band-limited noise resonances in
//! 2 to 6 kHz (identity cues above 2 kHz). Utterances add white noise at 20 dB
//! SNR and a random gain.

mod manifest;
mod trials;

pub use manifest::{
    parse_manifest, read_manifest, split_alternate, split_holdout, write_manifest, Manifest, ManifestEntry,
};
pub use trials::gen_trials;

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{wav::write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const N_HARMONICS: usize = 8;
pub const F0_RANGE: (f64, f64) = (100.0, 300.0);
pub const RESONANCE_RANGE: (f64, f64) = (2000.0, 6000.0);
pub const RESONANCE_BANDWIDTH: (f64, f64) = (150.0, 500.0);
pub const SNR_DB: f64 = 20.0;
pub const GAIN_RANGE: (f64, f64) = (0.5, 1.0);
/// Per-utterance jitter of the fundamental, as a fraction.
pub const F0_JITTER: f64 = 0.005;
const HARMONIC_SUM: f64 = 0.35;
const RESONANCE_RMS: f64 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct Resonance {
    pub center: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub index: usize,
    pub f0: f64,
    pub harmonic_amps: [f64; N_HARMONICS],
    pub hf_resonances: [Resonance; 2],
    pub corpus_seed: u64,
}

/// Independent generator for `(corpus seed, speaker, utterance)`; the
/// utterance slot `u64::MAX` is reserved for the speaker profile itself.
fn stream_rng(seed: u64, speaker: usize, utt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) ^ utt);
    rng
}

impl SpeakerProfile {
    pub fn generate(corpus_seed: u64, index: usize) -> Self {
        let mut rng = stream_rng(corpus_seed, index, u32::MAX as u64);
        let f0 = rng.random_range(F0_RANGE.0..=F0_RANGE.1);
        let mut amps = [0.0; N_HARMONICS];
        amps.iter_mut().for_each(|a| *a = rng.random_range(0.1..1.0));
        let sum: f64 = amps.iter().sum();
        amps.iter_mut().for_each(|a| *a *= HARMONIC_SUM / sum);
        let mut res = || Resonance {
            center: rng.random_range(RESONANCE_RANGE.0..=RESONANCE_RANGE.1),
            bandwidth: rng.random_range(RESONANCE_BANDWIDTH.0..=RESONANCE_BANDWIDTH.1),
        };
        let hf_resonances = [res(), res()];
        Self { id: format!("spk{index:03}"), index, f0, harmonic_amps: amps, hf_resonances, corpus_seed }
    }
}

/// Band-pass biquad with unit peak gain.
fn band_pass(x: &mut [f64], center: f64, bandwidth: f64, sample_rate: f64) {
    let w0 = 2.0 * PI * center / sample_rate;
    let q = center / bandwidth;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Utterance `utt` of `profile`, `seconds` long at 16 kHz.
pub fn synthesize(profile: &SpeakerProfile, utt: usize, seconds: f64) -> Waveform {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let mut rng = stream_rng(profile.corpus_seed, profile.index, utt as u64);
    let f0 = profile.f0 * rng.random_range(1.0 - F0_JITTER..=1.0 + F0_JITTER);
    let phases: Vec<f64> = (0..N_HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut signal: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            profile
                .harmonic_amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * (2.0 * PI * (h + 1) as f64 * f0 * t + p).sin())
                .sum::<f64>()
        })
        .collect();
    for r in &profile.hf_resonances {
        let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        band_pass(&mut noise, r.center, r.bandwidth, sr);
        let scale = RESONANCE_RMS / rms(&noise).max(1e-12);
        signal.iter_mut().zip(&noise).for_each(|(s, v)| *s += scale * v);
    }
    let noise_rms = rms(&signal) / 10f64.powf(SNR_DB / 20.0);
    let gain = rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1);
    let samples = signal
        .iter()
        .map(|&s| {
            let w: f64 = StandardNormal.sample(&mut rng);
            (gain * (s + noise_rms * w)).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub seconds_per_utt: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.utts_per_speaker < 2 {
            return Err(Error::InvalidConfig("a corpus needs at least 2 speakers with 2 utterances each".into()));
        }
        if !(self.seconds_per_utt > 0.0 && self.seconds_per_utt.is_finite()) {
            return Err(Error::InvalidConfig("utterance length must be positive".into()));
        }
        Ok(())
    }

    pub fn profiles(&self) -> Vec<SpeakerProfile> {
        (0..self.n_speakers).map(|i| SpeakerProfile::generate(self.seed, i)).collect()
    }
}

/// Writes `out_dir/wav/spkNNN/uttNNN.wav` for every utterance and returns
/// the manifest (paths relative to `out_dir`) in speaker-then-utterance
/// order.
pub fn gen_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>, exec: Exec) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let profiles = spec.profiles();
    let mut entries = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for p in &profiles {
        let dir = out_dir.join("wav").join(&p.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..spec.utts_per_speaker {
            entries.push(ManifestEntry { speaker: p.id.clone(), path: format!("wav/{}/utt{u:03}.wav", p.id) });
        }
    }
    let u_per = spec.utts_per_speaker;
    exec.try_map(entries.len(), |i| {
        let w = synthesize(&profiles[i / u_per], i % u_per, spec.seconds_per_utt);
        write_wav(out_dir.join(&entries[i].path), &w)
    })?;
    Ok(Manifest::new(out_dir, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{power_spectrum, wav::read_wav};

    /// Autocorrelation pitch with parabolic refinement of the peak lag.
    fn autocorr_pitch(x: &[f32]) -> f64 {
        let sr = SAMPLE_RATE as f64;
        let (lo, hi) = ((sr / 400.0) as usize, (sr / 80.0) as usize);
        let r = |lag: usize| -> f64 { (0..x.len() - lag).map(|i| x[i] as f64 * x[i + lag] as f64).sum() };
        let vals: Vec<f64> = (lo - 1..=hi + 1).map(r).collect();
        // first local peak close to the global maximum, so multiples of the
        // period are not mistaken for it
        let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = (1..vals.len() - 1)
            .find(|&k| vals[k] >= 0.85 * top && vals[k] >= vals[k - 1] && vals[k] >= vals[k + 1])
            .unwrap();
        let (y0, y1, y2) = (vals[best - 1], vals[best], vals[best + 1]);
        let shift = 0.5 * (y0 - y2) / (y0 - 2.0 * y1 + y2);
        sr / ((best + lo - 1) as f64 + shift)
    }

    fn mean_power(w: &Waveform) -> Vec<f64> {
        let frames = w.len() / 512;
        let mut acc = vec![0.0; 257];
        for f in 0..frames {
            let frame: Vec<f64> = w.samples[f * 512..(f + 1) * 512].iter().map(|&v| v as f64).collect();
            for (a, p) in acc.iter_mut().zip(power_spectrum(&frame, 512)) {
                *a += p;
            }
        }
        acc
    }

    #[test]
    fn profiles_in_range_and_deterministic() {
        for i in 0..50 {
            let p = SpeakerProfile::generate(7, i);
            assert!(p.f0 >= 100.0 && p.f0 <= 300.0);
            assert!(p.hf_resonances.iter().all(|r| r.center >= 2000.0 && r.center <= 6000.0));
            assert!((p.harmonic_amps.iter().sum::<f64>() - HARMONIC_SUM).abs() < 1e-12);
            assert_eq!(p, SpeakerProfile::generate(7, i));
        }
        assert_ne!(SpeakerProfile::generate(7, 0), SpeakerProfile::generate(8, 0));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = SpeakerProfile::generate(1, 3);
        assert_eq!(synthesize(&p, 2, 0.5), synthesize(&p, 2, 0.5));
        assert_ne!(synthesize(&p, 2, 0.5), synthesize(&p, 3, 0.5));
        let w = synthesize(&p, 0, 1.25);
        assert_eq!(w.len(), 20000);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn pitch_recovered_by_autocorrelation() {
        for i in 0..12 {
            let p = SpeakerProfile::generate(3, i);
            let w = synthesize(&p, i % 4, 1.0);
            let est = autocorr_pitch(&w.samples);
            assert!((est - p.f0).abs() <= 3.0, "speaker {i}: f0 {} estimated {est}", p.f0);
        }
    }

    #[test]
    fn resonances_stand_out_from_neighbouring_bins() {
        let bin_hz = SAMPLE_RATE as f64 / 512.0;
        let band = |spec: &[f64], f: f64, half: f64| -> f64 {
            let (a, b) = (((f - half) / bin_hz).round() as usize, ((f + half) / bin_hz).round() as usize);
            spec[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        };
        let mut checked = 0;
        for i in 0..12 {
            let p = SpeakerProfile::generate(5, i);
            let spec = mean_power(&synthesize(&p, 0, 2.0));
            for (j, r) in p.hf_resonances.iter().enumerate() {
                let other = &p.hf_resonances[1 - j];
                let neighbour = [r.center + 1200.0, r.center - 1200.0]
                    .into_iter()
                    .find(|&f| f > 3000.0 && f < 7600.0 && (f - other.center).abs() > 1200.0);
                let Some(nf) = neighbour else { continue };
                let ratio = band(&spec, r.center, r.bandwidth / 4.0) / band(&spec, nf, 100.0);
                assert!(ratio >= 3.0, "speaker {i} resonance {j}: ratio {ratio}");
                checked += 1;
            }
        }
        assert!(checked >= 8);
    }

    #[test]
    fn corpus_written_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n_speakers: 3, utts_per_speaker: 2, seconds_per_utt: 0.3, seed: 11 };
        let m = gen_corpus(&spec, dir.path().join("a"), Exec::Parallel).unwrap();
        assert_eq!(m.entries().len(), 6);
        let m2 = gen_corpus(&spec, dir.path().join("b"), Exec::Sequential).unwrap();
        for (a, b) in m.entries().iter().zip(m2.entries()) {
            assert_eq!(a, b);
            let (x, y) = (std::fs::read(m.resolve(a)).unwrap(), std::fs::read(m2.resolve(b)).unwrap());
            assert_eq!(x, y);
        }
        let w = read_wav(m.resolve(&m.entries()[0])).unwrap();
        assert_eq!(w.len(), 4800);
        assert!(gen_corpus(&CorpusSpec { n_speakers: 1, ..spec }, dir.path(), Exec::Sequential).is_err());
    }
}
