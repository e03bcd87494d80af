use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Training audio grouped by speaker; the speaker label is the group index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCorpus {
    pub speakers: Vec<String>,
    pub utterances: Vec<Vec<Waveform>>,
}

impl TrainingCorpus {
    pub fn new(speakers: Vec<String>, utterances: Vec<Vec<Waveform>>) -> Result<Self> {
        if speakers.len() != utterances.len() {
            return Err(Error::DimMismatch { left: speakers.len(), right: utterances.len() });
        }
        Ok(Self { speakers, utterances })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.utterances.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Waveform)> {
        self.utterances.iter().enumerate().flat_map(|(s, u)| u.iter().map(move |w| (s, w)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub chunk_samples: usize,
    pub max_utts_per_speaker: usize,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.utts_per_speaker < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch needs at least 2 speakers x 2 chunks, got {} x {}",
                self.n_speakers, self.utts_per_speaker
            )));
        }
        if self.chunk_samples == 0 {
            return Err(Error::InvalidConfig("empty chunk".into()));
        }
        Ok(())
    }

    pub fn batch_len(&self) -> usize {
        self.n_speakers * self.utts_per_speaker
    }
}

/// One batch ordered speaker-major: chunks `[s·M, (s+1)·M)` share a speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub chunks: Vec<Waveform>,
    pub labels: Vec<usize>,
    /// `(speaker, utterance index, start sample)` of every chunk.
    pub sources: Vec<(usize, usize, usize)>,
}

/// Draws batches from a per-speaker pool of at most `max_utts_per_speaker`
/// utterances, chosen once when the sampler is built.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    spec: BatchSpec,
    pools: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(corpus: &TrainingCorpus, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pools: Vec<Vec<usize>> = corpus
            .utterances
            .iter()
            .map(|u| {
                let mut idx = if u.len() > spec.max_utts_per_speaker {
                    sample(&mut rng, u.len(), spec.max_utts_per_speaker).into_vec()
                } else {
                    (0..u.len()).collect()
                };
                idx.sort_unstable();
                idx
            })
            .collect();
        let eligible: Vec<usize> = (0..pools.len()).filter(|&s| pools[s].len() >= spec.utts_per_speaker).collect();
        if eligible.len() < spec.n_speakers {
            return Err(Error::InsufficientData(format!(
                "{} speakers have at least {} utterances, batch needs {}",
                eligible.len(),
                spec.utts_per_speaker,
                spec.n_speakers
            )));
        }
        Ok(Self { spec, pools, eligible, rng })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    /// Total utterances available to the sampler after capping.
    pub fn pool_size(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    pub fn pool(&self, speaker: usize) -> &[usize] {
        &self.pools[speaker]
    }

    pub fn next_batch(&mut self, corpus: &TrainingCorpus) -> Batch {
        let BatchSpec { n_speakers, utts_per_speaker: m, chunk_samples, .. } = self.spec;
        let mut speakers = sample(&mut self.rng, self.eligible.len(), n_speakers).into_vec();
        speakers.sort_unstable();
        let mut batch = Batch { chunks: Vec::new(), labels: Vec::new(), sources: Vec::new() };
        for s in speakers.into_iter().map(|i| self.eligible[i]) {
            let pool = &self.pools[s];
            for j in sample(&mut self.rng, pool.len(), m) {
                let u = pool[j];
                let w = &corpus.utterances[s][u];
                let start =
                    if w.len() > chunk_samples { self.rng.random_range(0..=w.len() - chunk_samples) } else { 0 };
                batch.chunks.push(cut_chunk(w, start, chunk_samples));
                batch.labels.push(s);
                batch.sources.push((s, u, start));
            }
        }
        batch
    }
}

/// `len` samples from `start`, repeating the utterance from its beginning
/// when it is too short.
fn cut_chunk(w: &Waveform, start: usize, len: usize) -> Waveform {
    let samples =
        if w.is_empty() { vec![0.0; len] } else { (0..len).map(|i| w.samples[(start + i) % w.len()]).collect() };
    Waveform::new(samples, w.sample_rate)
}

/// The first `seconds` of `w`, or all of it when shorter.
pub fn leading_chunk(w: &Waveform, seconds: f64) -> Waveform {
    let n = ((seconds * w.sample_rate as f64).round() as usize).min(w.len());
    Waveform::new(w.samples[..n].to_vec(), w.sample_rate)
}
