//! Batch formation, the classification and prototypical losses, and
//! per-stream encoder training.

mod batch;
mod loss;
mod trainer;

pub use batch::{leading_chunk, Batch, BatchSampler, BatchSpec, TrainingCorpus};
pub use loss::{
    angular_prototypical_loss, combined_loss, softmax_loss, LossHead, LossOutput, LossVars, OMEGA_INIT, PROTO_BIAS_INIT,
};
pub use trainer::{train_stream, EpochLog, StreamTrainer, ValidationSet};

use crate::error::{Error, Result};

/// Seconds of audio embedded per utterance at evaluation time.
pub const EVAL_CHUNK_SECONDS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied once every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Chunks per batch; the number of speakers is `batch_utterances / M`.
    pub batch_utterances: usize,
    pub seed: u64,
    /// `M`: chunks per speaker in a batch.
    pub utts_per_speaker: usize,
    pub chunk_seconds: f64,
    pub max_utts_per_speaker: usize,
    /// Validation EER cadence in epochs; 0 disables validation.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            lr_decay: 0.95,
            decay_every: 10,
            batch_utterances: 64,
            seed: 0,
            utts_per_speaker: 2,
            chunk_seconds: 2.0,
            max_utts_per_speaker: 100,
            val_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} not in (0, 1]", self.lr_decay));
        }
        if self.decay_every < 1 {
            return bad("decay_every must be at least 1".into());
        }
        if self.utts_per_speaker < 2 {
            return bad("at least 2 utterances per speaker are needed in a batch".into());
        }
        if self.batch_utterances < 2 * self.utts_per_speaker {
            return bad(format!(
                "batch of {} chunks cannot hold 2 speakers x {}",
                self.batch_utterances, self.utts_per_speaker
            ));
        }
        if !(self.chunk_seconds > 0.0) {
            return bad("chunk_seconds must be positive".into());
        }
        if self.max_utts_per_speaker < self.utts_per_speaker {
            return bad("max_utts_per_speaker is smaller than M".into());
        }
        Ok(())
    }

    /// Learning rate during the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}
