use std::fmt;

use crate::dsp::{FeatureMatrix, Frontend, FrontendConfig, Waveform};
use crate::encoder::{features_to_tensor, Encoder, EncoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{eer, euclidean_distance};
use crate::nn::{Adam, AdamConfig, ParamId, ParamStore, Tape, Var};
use crate::training::{
    combined_loss, leading_chunk, BatchSampler, BatchSpec, LossHead, TrainConfig, TrainingCorpus, EVAL_CHUNK_SECONDS,
};

const HEAD_SEED: u64 = 0x4ead;
const SAMPLER_SEED: u64 = 0x5a3b;

/// Utterances and `(enroll, test, target)` index triples used to track
/// verification EER during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub utterances: Vec<Waveform>,
    pub trials: Vec<(usize, usize, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1_acc: f64,
    pub val_eer: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.4}\t", self.epoch, self.mean_loss, self.top1_acc)?;
        if let Some(e) = self.val_eer {
            write!(f, "{e:.4}")?;
        }
        Ok(())
    }
}

/// Training state of one stream: encoder, loss head, both optimizers and
/// the batch sampler.
pub struct StreamTrainer<'a> {
    corpus: &'a TrainingCorpus,
    frontend: Frontend,
    encoder: Encoder<f32>,
    head: LossHead<f32>,
    enc_opt: Adam<f32>,
    head_opt: Adam<f32>,
    sampler: BatchSampler,
    cfg: TrainConfig,
    exec: Exec,
    steps_per_epoch: usize,
    epoch: usize,
}

fn load_grads(params: &mut ParamStore<f32>, vars: &[Var], grads: &mut crate::nn::Gradients<f32>) {
    for (i, v) in vars.iter().enumerate() {
        let p = params.get_mut(ParamId(i));
        match grads.take(*v) {
            Some(g) => p.grad = g,
            None => p.grad.fill(0.0),
        }
    }
}

impl<'a> StreamTrainer<'a> {
    pub fn new(
        corpus: &'a TrainingCorpus,
        frontend: &FrontendConfig,
        encoder: &EncoderConfig,
        cfg: &TrainConfig,
        exec: Exec,
    ) -> Result<Self> {
        cfg.validate()?;
        if encoder.n_mels != frontend.n_mels {
            return Err(Error::InvalidConfig(format!(
                "encoder expects {} mel bins, front-end produces {}",
                encoder.n_mels, frontend.n_mels
            )));
        }
        let fe = Frontend::new(frontend)?;
        let m = cfg.utts_per_speaker;
        let spec = BatchSpec {
            n_speakers: (cfg.batch_utterances / m).min(corpus.n_speakers()),
            utts_per_speaker: m,
            chunk_samples: (cfg.chunk_seconds * frontend.sample_rate as f64).round() as usize,
            max_utts_per_speaker: cfg.max_utts_per_speaker,
        };
        let sampler = BatchSampler::new(corpus, spec, cfg.seed ^ SAMPLER_SEED)?;
        let steps_per_epoch = (sampler.pool_size() / spec.batch_len()).max(1);
        let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
        Ok(Self {
            corpus,
            frontend: fe,
            encoder: Encoder::new(encoder, cfg.seed)?,
            head: LossHead::new(encoder.embed_dim, corpus.n_speakers(), cfg.seed ^ HEAD_SEED)?,
            enc_opt: Adam::new(adam.clone()),
            head_opt: Adam::new(adam),
            sampler,
            cfg: cfg.clone(),
            exec,
            steps_per_epoch,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    /// Returns `(loss, correct top-1 predictions)`.
    fn step(&mut self, step: usize) -> Result<(f64, usize)> {
        let spec = *self.sampler.spec();
        let batch = self.sampler.next_batch(self.corpus);
        let frontend = &self.frontend;
        let feats = self.exec.try_map(batch.chunks.len(), |i| frontend.extract(&batch.chunks[i]))?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();

        let mut tape = Tape::with_exec(self.exec);
        let input = tape.leaf(features_to_tensor(&refs)?);
        let fwd = self.encoder.forward(&mut tape, input, true)?;
        let head_vars = self.head.leaves(&mut tape);
        let out =
            combined_loss(&mut tape, fwd.embedding, &head_vars, &batch.labels, spec.n_speakers, spec.utts_per_speaker)?;
        let loss = tape.value(out.total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch + 1, step });
        }
        let classes = self.head.classes();
        let correct = tape
            .value(out.logits)
            .data()
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &y)| {
                let best = row.iter().enumerate().fold(0, |b, (k, v)| if *v > row[b] { k } else { b });
                best == y
            })
            .count();

        let mut grads = tape.backward(out.total)?;
        load_grads(self.encoder.params_mut(), &fwd.param_vars, &mut grads);
        load_grads(self.head.params_mut(), &head_vars.as_array(), &mut grads);
        self.encoder.apply_batch_stats(&fwd);
        self.enc_opt.step(self.encoder.params_mut());
        self.head_opt.step(self.head.params_mut());
        Ok((loss, correct))
    }

    /// Runs one epoch and, on the validation cadence, the validation EER.
    pub fn run_epoch(&mut self, validation: Option<&ValidationSet>) -> Result<EpochLog> {
        let lr = self.cfg.lr_at(self.epoch);
        self.enc_opt.set_lr(lr);
        self.head_opt.set_lr(lr);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for s in 0..self.steps_per_epoch {
            let (l, c) = self.step(s)?;
            loss_sum += l;
            correct += c;
        }
        self.epoch += 1;
        let seen = self.steps_per_epoch * self.sampler.spec().batch_len();
        let val_eer = match validation {
            Some(v) if self.cfg.val_every > 0 && self.epoch.is_multiple_of(self.cfg.val_every) => {
                Some(self.validate(v)?)
            }
            _ => None,
        };
        Ok(EpochLog {
            epoch: self.epoch,
            mean_loss: loss_sum / self.steps_per_epoch as f64,
            top1_acc: correct as f64 / seen as f64,
            val_eer,
        })
    }

    fn eval_features(&self, waves: &[&Waveform]) -> Result<Vec<FeatureMatrix>> {
        self.exec.try_map(waves.len(), |i| self.frontend.extract(&leading_chunk(waves[i], EVAL_CHUNK_SECONDS)))
    }

    /// EER of the current encoder on `v`, scoring raw embeddings by negated
    /// Euclidean distance.
    pub fn validate(&self, v: &ValidationSet) -> Result<f64> {
        let waves: Vec<&Waveform> = v.utterances.iter().collect();
        let feats = self.eval_features(&waves)?;
        let emb = self.exec.try_map(feats.len(), |i| {
            let mut tape = Tape::with_exec(Exec::Sequential);
            let mut e = self.encoder.embed_batch(&[&feats[i]], &mut tape)?;
            Ok::<_, Error>(e.pop().expect("one embedding"))
        })?;
        let mut scores = Vec::with_capacity(v.trials.len());
        let mut labels = Vec::with_capacity(v.trials.len());
        for &(a, b, target) in &v.trials {
            let (ea, eb) = (
                emb.get(a).ok_or_else(|| Error::InsufficientData(format!("validation utterance {a}")))?,
                emb.get(b).ok_or_else(|| Error::InsufficientData(format!("validation utterance {b}")))?,
            );
            scores.push(-euclidean_distance(ea, eb)?);
            labels.push(target);
        }
        eer(&scores, &labels)
    }

    /// Freezes the encoder into a model whose embedding mean is taken over
    /// every training utterance.
    pub fn finish(self) -> Result<ModelWeights> {
        let waves: Vec<&Waveform> = self.corpus.iter().map(|(_, w)| w).collect();
        let feats = self.eval_features(&waves)?;
        let mut model = ModelWeights::new(self.encoder, self.frontend.config().clone())?;
        model.compute_embedding_mean(&feats, self.exec)?;
        Ok(model)
    }
}

/// Trains one stream for `cfg.epochs` epochs, reporting every epoch to
/// `on_epoch`.
pub fn train_stream(
    corpus: &TrainingCorpus,
    frontend: &FrontendConfig,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    validation: Option<&ValidationSet>,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelWeights, Vec<EpochLog>)> {
    let mut trainer = StreamTrainer::new(corpus, frontend, encoder, cfg, exec)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let log = trainer.run_epoch(validation)?;
        on_epoch(&log);
        history.push(log);
    }
    Ok((trainer.finish()?, history))
}
