//! `key=value` run configuration shared by the command-line tools and the
//! model file header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dsp::FrontendConfig;
use crate::encoder::{EncoderConfig, InitScheme};
use crate::error::{Error, Result};
use crate::metrics::DcfParams;
use crate::training::TrainConfig;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(Error::Parse { path: origin.to_path_buf(), line: i + 1, msg: format!("duplicate key {k}") });
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(origin: &Path, line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg: format!("invalid value {v:?} for {key}"),
    })
}

fn parse_list(origin: &Path, line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_value(origin, line, key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub dcf: DcfParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let frontend = FrontendConfig::default();
        let encoder = EncoderConfig { n_mels: frontend.n_mels, ..EncoderConfig::default() };
        Self { frontend, encoder, train: TrainConfig::default(), dcf: DcfParams::default() }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Applies `key=value` text on top of the current values. Unknown keys
    /// are rejected.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (line, k, v) in parse_kv(text, origin)? {
            self.set(&k, &v).map_err(|e| match e {
                Error::InvalidConfig(msg) => Error::Parse { path: origin.to_path_buf(), line, msg },
                other => other,
            })?;
        }
        self.validate()
    }

    /// Sets one key; values are validated later by [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = Path::new("<config>");
        match key {
            "frontend.n_mels" => {
                self.frontend.n_mels = parse_value(p, 0, key, v)?;
                self.encoder.n_mels = self.frontend.n_mels;
            }
            "frontend.f_min" => self.frontend.f_min = parse_value(p, 0, key, v)?,
            "frontend.f_max" => self.frontend.f_max = parse_value(p, 0, key, v)?,
            "frontend.win_ms" => self.frontend.win_ms = parse_value(p, 0, key, v)?,
            "frontend.step_ms" => self.frontend.step_ms = parse_value(p, 0, key, v)?,
            "frontend.n_fft" => self.frontend.n_fft = parse_value(p, 0, key, v)?,
            "frontend.preemph" => self.frontend.preemph = parse_value(p, 0, key, v)?,
            "frontend.log_floor" => self.frontend.log_floor = parse_value(p, 0, key, v)?,
            "encoder.base_channels" => self.encoder.base_channels = parse_value(p, 0, key, v)?,
            "encoder.blocks" => self.encoder.blocks_per_group = parse_list(p, 0, key, v)?,
            "encoder.strides" => self.encoder.group_strides = parse_list(p, 0, key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse_value(p, 0, key, v)?,
            "encoder.attention_dim" => self.encoder.attention_dim = parse_value(p, 0, key, v)?,
            "encoder.n_frames" => self.encoder.n_frames = parse_value(p, 0, key, v)?,
            "encoder.init" => {
                self.encoder.init = v.parse().map_err(|_| Error::InvalidConfig(format!("unknown init {v:?}")))?
            }
            "train.epochs" => self.train.epochs = parse_value(p, 0, key, v)?,
            "train.lr" => self.train.lr = parse_value(p, 0, key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse_value(p, 0, key, v)?,
            "train.decay_every" => self.train.decay_every = parse_value(p, 0, key, v)?,
            "train.batch" => self.train.batch_utterances = parse_value(p, 0, key, v)?,
            "train.seed" => self.train.seed = parse_value(p, 0, key, v)?,
            "train.M" => self.train.utts_per_speaker = parse_value(p, 0, key, v)?,
            "train.chunk_seconds" => self.train.chunk_seconds = parse_value(p, 0, key, v)?,
            "train.max_utts_per_speaker" => self.train.max_utts_per_speaker = parse_value(p, 0, key, v)?,
            "train.val_every" => self.train.val_every = parse_value(p, 0, key, v)?,
            "eval.p_target" => self.dcf.p_target = parse_value(p, 0, key, v)?,
            "eval.c_fa" => self.dcf.c_fa = parse_value(p, 0, key, v)?,
            "eval.c_fr" => self.dcf.c_fr = parse_value(p, 0, key, v)?,
            "eval.normalize" => self.dcf.normalize = parse_value(p, 0, key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        if self.encoder.n_mels != self.frontend.n_mels {
            return Err(Error::InvalidConfig("encoder and front-end disagree on n_mels".into()));
        }
        self.train.validate()?;
        self.dcf.validate()
    }

    /// Frontend and encoder keys in the canonical order used by model files.
    pub fn model_header(frontend: &FrontendConfig, encoder: &EncoderConfig) -> String {
        let mut s = String::new();
        let f = frontend;
        let _ = writeln!(s, "frontend.n_mels={}", f.n_mels);
        let _ = writeln!(s, "frontend.f_min={:?}", f.f_min);
        let _ = writeln!(s, "frontend.f_max={:?}", f.f_max);
        let _ = writeln!(s, "frontend.win_ms={}", f.win_ms);
        let _ = writeln!(s, "frontend.step_ms={}", f.step_ms);
        let _ = writeln!(s, "frontend.n_fft={}", f.n_fft);
        let _ = writeln!(s, "frontend.preemph={:?}", f.preemph);
        let _ = writeln!(s, "frontend.log_floor={:?}", f.log_floor);
        let e = encoder;
        let _ = writeln!(s, "encoder.n_frames={}", e.n_frames);
        let _ = writeln!(s, "encoder.base_channels={}", e.base_channels);
        let _ = writeln!(s, "encoder.blocks={}", join(&e.blocks_per_group));
        let _ = writeln!(s, "encoder.strides={}", join(&e.group_strides));
        let _ = writeln!(s, "encoder.embed_dim={}", e.embed_dim);
        let _ = writeln!(s, "encoder.attention_dim={}", e.attention_dim);
        let _ = writeln!(s, "encoder.init={}", e.init);
        s
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kaiming" => Ok(InitScheme::Kaiming),
            "xavier" => Ok(InitScheme::Xavier),
            "normal" => Ok(InitScheme::Normal),
            other => Err(Error::InvalidConfig(format!("unknown init scheme {other:?}"))),
        }
    }
}
