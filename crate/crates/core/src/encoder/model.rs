use std::fmt;
use std::str::FromStr;

use crate::dsp::{FeatureMatrix, FrontendConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Tape;

/// Utterance-level speaker vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Which frequency range a stream listens to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    /// Full band.
    Fb,
    /// Low sub-band (starts at the bottom of the full band).
    Lf,
    /// High sub-band (ends at the top of the full band).
    Hf,
    Custom,
}

impl StreamTag {
    pub fn from_band(f_min: f64, f_max: f64) -> Self {
        let full = FrontendConfig::default();
        match (f_min <= full.f_min, f_max >= full.f_max) {
            (true, true) => StreamTag::Fb,
            (true, false) => StreamTag::Lf,
            (false, true) => StreamTag::Hf,
            (false, false) => StreamTag::Custom,
        }
    }
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamTag::Fb => "FB",
            StreamTag::Lf => "LF",
            StreamTag::Hf => "HF",
            StreamTag::Custom => "custom",
        })
    }
}

impl FromStr for StreamTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FB" => Ok(StreamTag::Fb),
            "LF" => Ok(StreamTag::Lf),
            "HF" => Ok(StreamTag::Hf),
            "custom" => Ok(StreamTag::Custom),
            other => Err(Error::InvalidConfig(format!("unknown stream tag {other:?}"))),
        }
    }
}

/// A trained stream: encoder weights bound to the front-end they were
/// trained with, plus the training-set embedding mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: Encoder<f32>,
    pub frontend: FrontendConfig,
    pub stream_tag: StreamTag,
    pub embedding_mean: Option<Vec<f32>>,
}

impl ModelWeights {
    pub fn new(encoder: Encoder<f32>, frontend: FrontendConfig) -> Result<Self> {
        if encoder.config().n_mels != frontend.n_mels {
            return Err(Error::InvalidConfig(format!(
                "encoder expects {} mel bins, front-end produces {}",
                encoder.config().n_mels,
                frontend.n_mels
            )));
        }
        let stream_tag = StreamTag::from_band(frontend.f_min, frontend.f_max);
        Ok(Self { encoder, frontend, stream_tag, embedding_mean: None })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.config().embed_dim
    }

    fn check_frontend(&self, f: &FeatureMatrix) -> Result<()> {
        if f.fingerprint() != self.frontend.fingerprint() {
            return Err(Error::FrontendMismatch);
        }
        Ok(())
    }

    /// Eval-mode encoder output, before mean normalization.
    pub fn forward(&self, features: &FeatureMatrix) -> Result<Embedding> {
        self.check_frontend(features)?;
        let mut tape = Tape::with_exec(Exec::Sequential);
        let mut out = self.encoder.embed_batch(&[features], &mut tape)?;
        Ok(Embedding::new(out.pop().expect("one embedding per input")))
    }

    /// Mean-normalized embedding, ready for scoring and fusion.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<Embedding> {
        let raw = self.forward(features)?;
        mean_normalize_embedding(&raw, self)
    }

    /// Embeds many utterances, one tape per utterance, in input order.
    pub fn embed_all(&self, features: &[FeatureMatrix], exec: Exec) -> Result<Vec<Embedding>> {
        exec.try_map(features.len(), |i| self.embed(&features[i]))
    }

    /// Freezes the mean of the raw embeddings of `features` into the model.
    pub fn compute_embedding_mean(&mut self, features: &[FeatureMatrix], exec: Exec) -> Result<()> {
        if features.is_empty() {
            return Err(Error::InsufficientData("no utterances for the embedding mean".into()));
        }
        let raw = exec.try_map(features.len(), |i| self.forward(&features[i]))?;
        let dim = self.embed_dim();
        let mut sum = vec![0f64; dim];
        for e in &raw {
            for (s, &v) in sum.iter_mut().zip(&e.values) {
                *s += v as f64;
            }
        }
        self.embedding_mean = Some(sum.iter().map(|s| (s / raw.len() as f64) as f32).collect());
        Ok(())
    }
}

/// `e - embedding_mean`.
pub fn mean_normalize_embedding(e: &Embedding, m: &ModelWeights) -> Result<Embedding> {
    let mean = m.embedding_mean.as_ref().ok_or(Error::MissingStats)?;
    if mean.len() != e.dim() {
        return Err(Error::DimMismatch { left: e.dim(), right: mean.len() });
    }
    Ok(Embedding::new(e.values.iter().zip(mean).map(|(a, b)| a - b).collect()))
}
