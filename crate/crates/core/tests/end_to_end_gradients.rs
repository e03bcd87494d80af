use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msv_core::encoder::{Encoder, EncoderConfig};
use msv_core::nn::check::{gradient_error, CheckOptions};
use msv_core::nn::{Tensor, Var};
use msv_core::training::{combined_loss, LossHead, LossVars};

const N: usize = 3;
const M: usize = 2;

/// Features through the toy encoder into the combined loss; checks the
/// gradient of every input feature, encoder parameter and loss parameter.
fn end_to_end_error(seed: u64) -> f64 {
    let cfg = EncoderConfig { n_mels: 12, n_frames: 24, ..EncoderConfig::toy() };
    let enc = Encoder::<f64>::new(&cfg, seed).unwrap();
    let head = LossHead::<f64>::new(cfg.embed_dim, N, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = Tensor::from_fn([N * M, cfg.n_mels, cfg.n_frames, 1], |_| rng.random_range(-1.0..1.0));

    let mut inputs = vec![feats];
    inputs.extend(enc.params().iter().map(|p| p.value.clone()));
    inputs.extend(head.params().iter().map(|p| p.value.clone()));
    let n_enc = enc.params().len();
    let labels: Vec<usize> = (0..N * M).map(|i| i / M).collect();

    let opts = CheckOptions { h: 1e-8, seed, max_coords: Some(16) };
    gradient_error(&inputs, &opts, |tape, v: &[Var]| {
        let fwd = enc.forward_with(tape, v[0], v[1..=n_enc].to_vec(), true).unwrap();
        let h = &v[1 + n_enc..];
        let vars = LossVars { weight: h[0], bias: h[1], omega: h[2], proto_bias: h[3] };
        combined_loss(tape, fwd.embedding, &vars, &labels, N, M).unwrap().total
    })
}

#[test]
fn toy_encoder_loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let err = end_to_end_error(seed);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
