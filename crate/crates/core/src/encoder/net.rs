use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::FeatureMatrix;
use crate::encoder::{EncoderConfig, InitScheme};
use crate::error::{Error, Result};
use crate::nn::{BnMode, BnStats, ParamId, ParamStore, Real, Tape, Tensor, Var, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    conv: ParamId,
    stride: usize,
    bn: BnIds,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    a: ConvBn,
    b: ConvBn,
    skip: Option<(ParamId, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: ConvBn,
    groups: Vec<Vec<Block>>,
    attn_w: ParamId,
    attn_b: ParamId,
    attn_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Result of one forward pass recorded on a tape.
pub struct Forward {
    /// `[B, embed_dim]`.
    pub embedding: Var,
    /// Tape leaf of every parameter, indexed like the parameter store.
    pub param_vars: Vec<Var>,
    /// Shapes after the stem and after each residual group.
    pub stage_shapes: Vec<Vec<usize>>,
    bn_stats: Vec<(BnIds, BnStats)>,
}

/// Residual CNN: 3×3 stem, four residual groups (conv-BN-ReLU ×2 plus skip,
/// stride on the first block of a group), attentive statistics pooling over
/// time and a linear projection to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F: Real = f32> {
    cfg: EncoderConfig,
    params: ParamStore<F>,
    layout: Layout,
}

struct Init<'a> {
    scheme: InitScheme,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn weights<F: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = match self.scheme {
            InitScheme::Kaiming => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| F::of(d.sample(self.rng))).collect()
            }
            InitScheme::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::of(self.rng.random_range(-a..a))).collect()
            }
            InitScheme::Normal => {
                let d = Normal::new(0.0, 0.01).expect("positive std");
                (0..n).map(|_| F::of(d.sample(self.rng))).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }
}

fn add_bn<F: Real>(p: &mut ParamStore<F>, name: &str, c: usize) -> BnIds {
    BnIds {
        gamma: p.add(format!("{name}.gamma"), Tensor::full([c], F::one())),
        beta: p.add(format!("{name}.beta"), Tensor::zeros([c])),
        mean: p.add_buffer(format!("{name}.running_mean"), Tensor::zeros([c])),
        var: p.add_buffer(format!("{name}.running_var"), Tensor::full([c], F::one())),
    }
}

fn add_conv<F: Real>(
    p: &mut ParamStore<F>,
    init: &mut Init<'_>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> ParamId {
    let w = init.weights(&[k, k, cin, cout], k * k * cin, k * k * cout);
    p.add(format!("{name}.weight"), w)
}

impl<F: Real> Encoder<F> {
    /// Builds the network with weights drawn from `cfg.init`, deterministic
    /// in `seed`.
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { scheme: cfg.init, rng: &mut rng };
        let mut p = ParamStore::new();

        let c0 = cfg.group_channels(0);
        let stem = ConvBn {
            conv: add_conv(&mut p, &mut init, "conv1", 3, 1, c0),
            stride: 1,
            bn: add_bn(&mut p, "conv1.bn", c0),
        };

        let mut groups = Vec::with_capacity(4);
        let mut cin = c0;
        for g in 0..4 {
            let cout = cfg.group_channels(g);
            let mut blocks = Vec::with_capacity(cfg.blocks_per_group[g]);
            for bi in 0..cfg.blocks_per_group[g] {
                let name = format!("res{}.{}", g + 1, bi);
                let stride = if bi == 0 { cfg.group_strides[g] } else { 1 };
                let block_in = if bi == 0 { cin } else { cout };
                let a = ConvBn {
                    conv: add_conv(&mut p, &mut init, &format!("{name}.conv_a"), 3, block_in, cout),
                    stride,
                    bn: add_bn(&mut p, &format!("{name}.bn_a"), cout),
                };
                let b = ConvBn {
                    conv: add_conv(&mut p, &mut init, &format!("{name}.conv_b"), 3, cout, cout),
                    stride: 1,
                    bn: add_bn(&mut p, &format!("{name}.bn_b"), cout),
                };
                let skip = (stride != 1 || block_in != cout)
                    .then(|| (add_conv(&mut p, &mut init, &format!("{name}.skip"), 1, block_in, cout), stride));
                blocks.push(Block { a, b, skip });
            }
            groups.push(blocks);
            cin = cout;
        }

        let d = cfg.pooled_input_dim();
        let a = cfg.attention_dim;
        let attn_w = p.add("asp.attn.weight", init.weights(&[d, a], d, a));
        let attn_b = p.add("asp.attn.bias", Tensor::zeros([a]));
        let attn_v = p.add("asp.score.weight", init.weights(&[a, 1], a, 1));
        let out_w = p.add("embed.weight", init.weights(&[2 * d, cfg.embed_dim], 2 * d, cfg.embed_dim));
        let out_b = p.add("embed.bias", Tensor::zeros([cfg.embed_dim]));

        let layout = Layout { stem, groups, attn_w, attn_b, attn_v, out_w, out_b };
        Ok(Self { cfg: cfg.clone(), params: p, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder { cfg: self.cfg.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn conv_bn(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        cb: &ConvBn,
        train: bool,
        stats: &mut Vec<(BnIds, BnStats)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, vars[cb.conv.0], (cb.stride, cb.stride))?;
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval { mean: self.params.value(cb.bn.mean).data(), var: self.params.value(cb.bn.var).data() }
        };
        let (y, s) = tape.batch_norm(y, vars[cb.bn.gamma.0], vars[cb.bn.beta.0], mode)?;
        if let Some(s) = s {
            stats.push((cb.bn, s));
        }
        Ok(y)
    }

    /// Records the forward pass of `input: [B, n_mels, frames, 1]`.
    ///
    /// In training mode batch statistics are used and returned for
    /// [`Encoder::apply_batch_stats`]; in eval mode the running statistics
    /// are used.
    pub fn forward(&self, tape: &mut Tape<F>, input: Var, train: bool) -> Result<Forward> {
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        self.forward_with(tape, input, param_vars, train)
    }

    /// As [`Encoder::forward`], reading parameters from `param_vars` (one
    /// per store entry, in store order) instead of fresh leaves.
    pub fn forward_with(&self, tape: &mut Tape<F>, input: Var, param_vars: Vec<Var>, train: bool) -> Result<Forward> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.cfg.n_mels || s[3] != 1 {
            return Err(Error::shape("encoder", format!("input {s:?}, expected [B, {}, frames, 1]", self.cfg.n_mels)));
        }
        if param_vars.len() != self.params.len() {
            return Err(Error::shape(
                "encoder",
                format!("{} parameter vars for {} parameters", param_vars.len(), self.params.len()),
            ));
        }
        let mut stats = Vec::new();
        let mut stage_shapes = Vec::with_capacity(5);

        let mut x = self.conv_bn(tape, &param_vars, input, &self.layout.stem, train, &mut stats)?;
        x = tape.relu(x);
        stage_shapes.push(tape.shape(x).to_vec());

        for blocks in &self.layout.groups {
            for block in blocks {
                let h = self.conv_bn(tape, &param_vars, x, &block.a, train, &mut stats)?;
                let h = tape.relu(h);
                let h = self.conv_bn(tape, &param_vars, h, &block.b, train, &mut stats)?;
                let shortcut = match block.skip {
                    Some((w, stride)) => tape.conv2d(x, param_vars[w.0], (stride, stride))?,
                    None => x,
                };
                let sum = tape.add(h, shortcut)?;
                x = tape.relu(sum);
            }
            stage_shapes.push(tape.shape(x).to_vec());
        }

        // [B, F', T', C] -> [B, T', F'·C]
        let xs = tape.shape(x).to_vec();
        let (b, fq, t, c) = (xs[0], xs[1], xs[2], xs[3]);
        if t < 2 {
            return Err(Error::shape("encoder", format!("input of {} frames pools to {t} time steps", s[2])));
        }
        let seq = tape.swap_freq_time(x)?;
        let d = fq * c;
        if d != self.cfg.pooled_input_dim() {
            return Err(Error::shape(
                "encoder",
                format!("pooled width {d}, model expects {}", self.cfg.pooled_input_dim()),
            ));
        }
        let rows = tape.reshape(seq, &[b * t, d])?;
        let l = &self.layout;
        let hidden = tape.linear(rows, param_vars[l.attn_w.0], Some(param_vars[l.attn_b.0]))?;
        let hidden = tape.tanh(hidden);
        let scores = tape.linear(hidden, param_vars[l.attn_v.0], None)?;
        let scores = tape.reshape(scores, &[b, t])?;
        let h = tape.reshape(seq, &[b, t, d])?;
        let pooled = tape.attentive_stats(h, scores)?;
        let embedding = tape.linear(pooled, param_vars[l.out_w.0], Some(param_vars[l.out_b.0]))?;

        Ok(Forward { embedding, param_vars, stage_shapes, bn_stats: stats })
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running statistics.
    pub fn apply_batch_stats(&mut self, fwd: &Forward) {
        for (ids, s) in &fwd.bn_stats {
            for (ids_buf, batch) in [(ids.mean, &s.mean), (ids.var, &s.var)] {
                let run = &mut self.params.get_mut(ids_buf).value;
                for (r, &v) in run.data_mut().iter_mut().zip(batch.iter()) {
                    *r = F::of((1.0 - BN_MOMENTUM) * r.f64() + BN_MOMENTUM * v);
                }
            }
        }
    }

    /// Eval-mode embeddings for a batch of equally sized feature matrices.
    pub fn embed_batch(&self, feats: &[&FeatureMatrix], tape: &mut Tape<F>) -> Result<Vec<Vec<F>>> {
        let input = tape.leaf(features_to_tensor(feats)?);
        let fwd = self.forward(tape, input, false)?;
        let e = tape.value(fwd.embedding);
        Ok(e.data().chunks(self.cfg.embed_dim).map(<[F]>::to_vec).collect())
    }
}

/// Stacks feature matrices into `[B, n_mels, frames, 1]`.
pub fn features_to_tensor<F: Real>(feats: &[&FeatureMatrix]) -> Result<Tensor<F>> {
    let first = feats.first().ok_or_else(|| Error::shape("features", "empty batch"))?;
    let (m, t) = (first.n_mels, first.n_frames);
    let mut data = Vec::with_capacity(feats.len() * m * t);
    for f in feats {
        if (f.n_mels, f.n_frames) != (m, t) {
            return Err(Error::shape("features", format!("{}x{} vs {m}x{t}", f.n_mels, f.n_frames)));
        }
        data.extend(f.values.iter().map(|&v| F::of(v as f64)));
    }
    Tensor::new([feats.len(), m, t, 1], data)
}
