use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const OMEGA_INIT: f64 = 10.0;
pub const PROTO_BIAS_INIT: f64 = -5.0;

/// Trainable parameters of the losses: the speaker classifier `W: [E, C]`,
/// `b: [C]` and the scale and offset of the prototypical similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHead<F: Real = f32> {
    params: ParamStore<F>,
    classes: usize,
    embed_dim: usize,
}

/// Tape leaves of a [`LossHead`], in parameter-store order.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub weight: Var,
    pub bias: Var,
    pub omega: Var,
    pub proto_bias: Var,
}

impl LossVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.weight, self.bias, self.omega, self.proto_bias]
    }
}

impl<F: Real> LossHead<F> {
    /// Xavier-uniform classifier weights, zero classifier bias.
    pub fn new(embed_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "loss head needs a non-empty embedding and 2+ classes, got {embed_dim} and {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (embed_dim + classes) as f64).sqrt();
        let mut params = ParamStore::new();
        params.add("head.weight", Tensor::from_fn([embed_dim, classes], |_| F::of(rng.random_range(-a..a))));
        params.add("head.bias", Tensor::zeros([classes]));
        params.add("proto.omega", Tensor::full([1], F::of(OMEGA_INIT)));
        params.add("proto.bias", Tensor::full([1], F::of(PROTO_BIAS_INIT)));
        Ok(Self { params, classes, embed_dim })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn leaves(&self, tape: &mut Tape<F>) -> LossVars {
        let mut v = (0..4).map(|i| tape.leaf(self.params.value(ParamId(i)).clone()));
        let mut next = || v.next().expect("four loss parameters");
        LossVars { weight: next(), bias: next(), omega: next(), proto_bias: next() }
    }
}

/// Mean cross-entropy of the speaker classifier; returns `(loss, logits)`.
pub fn softmax_loss<F: Real>(
    tape: &mut Tape<F>,
    emb: Var,
    weight: Var,
    bias: Var,
    labels: &[usize],
) -> Result<(Var, Var)> {
    let logits = tape.linear(emb, weight, Some(bias))?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((loss, logits))
}

/// Prototypical loss on cosine similarities for `emb` ordered speaker-major
/// as `n_speakers` groups of `per_speaker` rows.
pub fn angular_prototypical_loss<F: Real>(
    tape: &mut Tape<F>,
    emb: Var,
    omega: Var,
    bias: Var,
    n_speakers: usize,
    per_speaker: usize,
) -> Result<Var> {
    tape.angular_prototypical(emb, omega, bias, n_speakers, per_speaker)
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub softmax: Var,
    pub prototypical: Var,
    pub logits: Var,
}

/// Sum of the softmax and angular prototypical losses on one batch.
pub fn combined_loss<F: Real>(
    tape: &mut Tape<F>,
    emb: Var,
    head: &LossVars,
    labels: &[usize],
    n_speakers: usize,
    per_speaker: usize,
) -> Result<LossOutput> {
    let (softmax, logits) = softmax_loss(tape, emb, head.weight, head.bias, labels)?;
    let prototypical = angular_prototypical_loss(tape, emb, head.omega, head.proto_bias, n_speakers, per_speaker)?;
    let total = tape.add(softmax, prototypical)?;
    Ok(LossOutput { total, softmax, prototypical, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{gradient_error, CheckOptions};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::full([1], v)
    }

    fn softmax_value(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, labels: &[usize]) -> f64 {
        let mut t = Tape::new();
        let (x, w, b) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let (l, _) = softmax_loss(&mut t, x, w, b, labels).unwrap();
        t.value(l).item()
    }

    fn proto_value(e: &Tensor<f64>, omega: f64, bias: f64, n: usize, m: usize) -> f64 {
        let mut t = Tape::new();
        let (e, o, b) = (t.leaf(e.clone()), t.leaf(scalar(omega)), t.leaf(scalar(bias)));
        let l = angular_prototypical_loss(&mut t, e, o, b, n, m).unwrap();
        t.value(l).item()
    }

    fn naive_softmax(x: &[f64], w: &[f64], b: &[f64], labels: &[usize], e: usize, c: usize) -> f64 {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..c).map(|k| b[k] + (0..e).map(|d| x[i * e + d] * w[d * c + k]).sum::<f64>()).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total -= (z[y].exp() / denom).ln();
        }
        total / labels.len() as f64
    }

    fn naive_proto(x: &[f64], omega: f64, bias: f64, n: usize, m: usize, d: usize) -> f64 {
        let v = |s: usize, j: usize| &x[(s * m + j) * d..(s * m + j + 1) * d];
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            dot / (a.iter().map(|p| p * p).sum::<f64>().sqrt() * b.iter().map(|q| q * q).sum::<f64>().sqrt())
        };
        let centroids: Vec<Vec<f64>> = (0..n)
            .map(|k| (0..d).map(|i| (0..m - 1).map(|j| v(k, j)[i]).sum::<f64>() / (m - 1) as f64).collect())
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            let s: Vec<f64> = (0..n).map(|k| omega * cos(v(i, m - 1), &centroids[k]) + bias).collect();
            let denom: f64 = s.iter().map(|z| z.exp()).sum();
            total -= (s[i].exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::full([5, 8], 0.7);
        let l = softmax_value(&x, &Tensor::zeros([8, 10]), &Tensor::zeros([10]), &[0, 3, 9, 2, 2]);
        assert!((l - 10f64.ln()).abs() < 1e-6);

        // logit 50 on the correct class, 0 elsewhere
        let x = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut w = Tensor::zeros([2, 4]);
        w.data_mut()[1] = 50.0;
        w.data_mut()[4 + 2] = 50.0;
        let l = softmax_value(&x, &w, &Tensor::zeros([4]), &[1, 2]);
        assert!(l < 1e-15, "{l}");
    }

    #[test]
    fn softmax_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, e, c) = (6, 5, 4);
        let x = rand_tensor(&mut rng, &[n, e], 1.0);
        let w = rand_tensor(&mut rng, &[e, c], 1.0);
        let b = rand_tensor(&mut rng, &[c], 0.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let expect = naive_softmax(x.data(), w.data(), b.data(), &labels, e, c);
        assert!((softmax_value(&x, &w, &b, &labels) - expect).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_label() {
        let mut t = Tape::<f64>::new();
        let (x, w, b) = (t.leaf(Tensor::zeros([2, 3])), t.leaf(Tensor::zeros([3, 4])), t.leaf(Tensor::zeros([4])));
        assert!(matches!(softmax_loss(&mut t, x, w, b, &[0, 4]), Err(Error::LabelOutOfRange { label: 4, classes: 4 })));
    }

    #[test]
    fn proto_closed_forms() {
        for n in [2usize, 3, 7] {
            let e = Tensor::full([n * 2, 6], 0.3);
            assert!((proto_value(&e, 1.0, 0.0, n, 2) - (n as f64).ln()).abs() < 1e-6);
        }
        // each speaker on its own axis: own centroid cos 1, others cos 0
        let (n, m, d) = (3, 2, 4);
        let e = Tensor::from_fn([n * m, d], |i| if i % d == (i / d) / m { 1.0 } else { 0.0 });
        let l = proto_value(&e, 30.0, 0.0, n, m);
        assert!(l < 1e-9 && l >= 0.0, "{l}");
        let expect = (1.0 + 2.0 * (-30f64).exp()).ln();
        assert!((l - expect).abs() < 1e-13);
    }

    #[test]
    fn proto_matches_naive() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + seed as usize % 2;
            let e = rand_tensor(&mut rng, &[3 * m, 8], 1.0);
            let expect = naive_proto(e.data(), 7.5, -2.0, 3, m, 8);
            assert!((proto_value(&e, 7.5, -2.0, 3, m) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn proto_scale_invariance_and_exchangeability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, d) = (4, 3, 8);
        let e = rand_tensor(&mut rng, &[n * m, d], 1.0);
        let base = proto_value(&e, OMEGA_INIT, PROTO_BIAS_INIT, n, m);
        let doubled = Tensor::from_fn([n * m, d], |i| 2.0 * e.data()[i]);
        assert!((proto_value(&doubled, OMEGA_INIT, PROTO_BIAS_INIT, n, m) - base).abs() < 1e-6);

        let perm = [2usize, 0, 3, 1];
        let rows = m * d;
        let mut permuted = Vec::with_capacity(e.len());
        for &p in &perm {
            permuted.extend_from_slice(&e.data()[p * rows..(p + 1) * rows]);
        }
        let permuted = Tensor::new([n * m, d], permuted).unwrap();
        assert!((proto_value(&permuted, OMEGA_INIT, PROTO_BIAS_INIT, n, m) - base).abs() < 1e-9);
    }

    #[test]
    fn proto_rejects_zero_vectors() {
        let mut t = Tape::<f64>::new();
        let e = t.leaf(Tensor::zeros([4, 3]));
        let (o, b) = (t.leaf(scalar(1.0)), t.leaf(scalar(0.0)));
        assert!(matches!(angular_prototypical_loss(&mut t, e, o, b, 2, 2), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn combined_is_sum() {
        let mut head = LossHead::<f64>::new(6, 10, 0).unwrap();
        head.params_mut().get_mut(ParamId(0)).value.fill(0.0);
        head.params_mut().get_mut(ParamId(2)).value.fill(1.0);
        head.params_mut().get_mut(ParamId(3)).value.fill(0.0);
        let mut t = Tape::new();
        let e = t.leaf(Tensor::full([6, 6], 0.4));
        let vars = head.leaves(&mut t);
        let out = combined_loss(&mut t, e, &vars, &[0, 0, 4, 4, 9, 9], 3, 2).unwrap();
        assert!((t.value(out.total).item() - (10f64.ln() + 3f64.ln())).abs() < 1e-6);

        // prototypical term vanishing: total equals the softmax term
        let mut t = Tape::new();
        let e = t.leaf(Tensor::from_fn([6, 6], |i| if i % 6 == (i / 6) / 2 { 1.0 } else { 0.0 }));
        let mut vars = head.leaves(&mut t);
        vars.omega = t.leaf(scalar(40.0));
        let out = combined_loss(&mut t, e, &vars, &[0, 0, 1, 1, 2, 2], 3, 2).unwrap();
        assert!(t.value(out.prototypical).item() < 1e-15);
        assert!((t.value(out.total).item() - t.value(out.softmax).item()).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head = LossHead::<f64>::new(8, 5, 1).unwrap();
        let e = rand_tensor(&mut rng, &[6, 8], 1.0);
        let labels = [0, 0, 3, 3, 4, 4];

        let mut t = Tape::new();
        let ev = t.leaf(e.clone());
        let vars = head.leaves(&mut t);
        let out = combined_loss(&mut t, ev, &vars, &labels, 3, 2).unwrap();
        let g = t.backward(out.total).unwrap();

        let mut t1 = Tape::new();
        let ev1 = t1.leaf(e.clone());
        let v1 = head.leaves(&mut t1);
        let (sm, _) = softmax_loss(&mut t1, ev1, v1.weight, v1.bias, &labels).unwrap();
        let g1 = t1.backward(sm).unwrap();

        let mut t2 = Tape::new();
        let ev2 = t2.leaf(e);
        let v2 = head.leaves(&mut t2);
        let ap = angular_prototypical_loss(&mut t2, ev2, v2.omega, v2.proto_bias, 3, 2).unwrap();
        let g2 = t2.backward(ap).unwrap();

        let sum = g1.get(ev1).unwrap().data().iter().zip(g2.get(ev2).unwrap().data()).map(|(a, b)| a + b);
        for (a, b) in g.get(ev).unwrap().data().iter().zip(sum) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!((g.get(vars.omega).unwrap().item() - g2.get(v2.omega).unwrap().item()).abs() < 1e-7);
        assert!((g.get(vars.weight).unwrap().data()[3] - g1.get(v1.weight).unwrap().data()[3]).abs() < 1e-7);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let e = rand_tensor(&mut rng, &[6, 8], 1.0);
            let w = rand_tensor(&mut rng, &[8, 4], 0.5);
            let b = rand_tensor(&mut rng, &[4], 0.5);
            let labels: Vec<usize> = (0..6).map(|i| (i / 2 + seed as usize) % 4).collect();
            let opts = CheckOptions { seed, ..Default::default() };
            let err =
                gradient_error(&[e.clone(), w, b], &opts, |t, v| softmax_loss(t, v[0], v[1], v[2], &labels).unwrap().0);
            assert!(err < 1e-4, "softmax seed {seed}: {err}");
            let err = gradient_error(&[e, scalar(10.0), scalar(-5.0)], &opts, |t, v| {
                angular_prototypical_loss(t, v[0], v[1], v[2], 3, 2).unwrap()
            });
            assert!(err < 1e-4, "prototypical seed {seed}: {err}");
        }
    }
}
