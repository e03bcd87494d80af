//! Central finite-difference checks of every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{gradient_error, CheckOptions};
use super::*;

fn max_rel_err<B>(inputs: &[Tensor<f64>], seed: u64, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    gradient_error(inputs, &CheckOptions { seed, ..Default::default() }, build)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = if seed % 2 == 0 { (1, 1) } else { (2, 2) };
        let (kh, kw) = if seed % 3 == 0 { (1, 1) } else { (3, 3) };
        let x = rand_tensor(&mut rng, &[2, 5, 4, 2], 1.0);
        let k = rand_tensor(&mut rng, &[kh, kw, 2, 3], 1.0);
        let err = max_rel_err(&[x, k], seed, |t, v| t.conv2d(v[0], v[1], stride).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[4, 4, 2], 1.0);
        let g = rand_tensor(&mut rng, &[2], 2.0);
        let b = rand_tensor(&mut rng, &[2], 1.0);
        let err = max_rel_err(&[x.clone(), g.clone(), b.clone()], seed, |t, v| {
            t.batch_norm(v[0], v[1], v[2], BnMode::Train).unwrap().0
        });
        assert!(err < TOL, "train seed {seed}: {err}");
        let (mean, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
        let err = max_rel_err(&[x, g, b], seed, |t, v| {
            t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }).unwrap().0
        });
        assert!(err < TOL, "eval seed {seed}: {err}");
    }
}

#[test]
fn elementwise_and_dense_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = away_from_zero(&mut rng, &[3, 5]);
        assert!(max_rel_err(&[x.clone()], seed, |t, v| t.relu(v[0])) < TOL);
        assert!(max_rel_err(&[x.clone()], seed, |t, v| t.tanh(v[0])) < TOL);
        let w = rand_tensor(&mut rng, &[5, 4], 1.0);
        let b = rand_tensor(&mut rng, &[4], 1.0);
        let err = max_rel_err(&[x.clone(), w.clone(), b], seed, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
        assert!(err < TOL, "linear seed {seed}: {err}");
        let y = rand_tensor(&mut rng, &[3, 5], 1.0);
        assert!(max_rel_err(&[x.clone(), y], seed, |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
        let z = rand_tensor(&mut rng, &[2, 3, 4, 2], 1.0);
        let err = max_rel_err(&[z], seed, |t, v| {
            let s = t.swap_freq_time(v[0]).unwrap();
            let r = t.reshape(s, &[2, 4, 6]).unwrap();
            t.tanh(r)
        });
        assert!(err < TOL);
    }
}

#[test]
fn softmax_ce_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let logits = rand_tensor(&mut rng, &[4, 6], 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let err = max_rel_err(&[logits], seed, |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn attentive_stats_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let h = rand_tensor(&mut rng, &[2, 5, 3], 1.0);
        let e = rand_tensor(&mut rng, &[2, 5], 2.0);
        let err = max_rel_err(&[h, e], seed, |t, v| t.attentive_stats(v[0], v[1]).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn angular_prototypical_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let m = if seed % 2 == 0 { 2 } else { 3 };
        let emb = rand_tensor(&mut rng, &[3 * m, 8], 1.0);
        let omega = Tensor::scalar(rng.random_range(1.0..12.0));
        let bias = Tensor::scalar(rng.random_range(-6.0..0.0));
        let err =
            max_rel_err(&[emb, omega, bias], seed, |t, v| t.angular_prototypical(v[0], v[1], v[2], 3, m).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let pt = (((ho - 1) * stride + kh).saturating_sub(h) / 2) as isize;
    let pl = (((wo - 1) * stride + kw).saturating_sub(w) / 2) as isize;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pt;
                        let ix = (ox * stride + kx) as isize - pl;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[((iy as usize) * w + ix as usize) * cin + ci];
                            acc += xv * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let cin = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let x = rand_tensor(&mut rng, &[1, h, w, cin], 1.0);
        let k = rand_tensor(&mut rng, &[3, 3, cin, 4], 1.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv2d(xv, kv, (stride, stride)).unwrap();
        let expected = naive_conv(&x, &k, stride);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn conv2d_shapes_and_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_fn([1, 4, 6, 1], |i| i as f32));
    let one = tape.leaf(Tensor::full([1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, one, (1, 1)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let x = tape.leaf(Tensor::zeros([1, 40, 200, 1]));
    let k = tape.leaf(Tensor::zeros([3, 3, 1, 16]));
    let y = tape.conv2d(x, k, (1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 40, 200, 16]);
    let k2 = tape.leaf(Tensor::zeros([3, 3, 16, 32]));
    let y2 = tape.conv2d(y, k2, (2, 2)).unwrap();
    assert_eq!(tape.shape(y2), &[1, 20, 100, 32]);

    let bad = tape.leaf(Tensor::zeros([3, 3, 2, 4]));
    assert!(matches!(tape.conv2d(x, bad, (1, 1)), Err(crate::Error::ShapeMismatch { .. })));
}

#[test]
fn batch_norm_forward_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full([3, 4, 2], 7.0));
    let g = tape.leaf(Tensor::new([2], vec![2.0, 3.0]).unwrap());
    let b = tape.leaf(Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
    assert_eq!(stats.unwrap().mean, vec![7.0, 7.0]);
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(*v, if i % 2 == 0 { 0.5 } else { -1.5 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = tape.leaf(Tensor::from_fn([64, 3], |i| rng.random_range(-5.0..5.0) + i as f64 % 3.0));
    let g = tape.leaf(Tensor::full([3], 1.0));
    let b = tape.leaf(Tensor::zeros([3]));
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = tape.value(y).data().iter().skip(c).step_by(3).copied().collect();
        let mean = vals.iter().sum::<f64>() / 64.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn relu_and_softmax_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let z = tape.leaf(Tensor::zeros([3, 7]));
    let l = tape.softmax_cross_entropy(z, &[0, 3, 6]).unwrap();
    assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);
    assert!(matches!(tape.softmax_cross_entropy(z, &[0, 7, 1]), Err(crate::Error::LabelOutOfRange { .. })));
}

#[test]
fn forward_is_deterministic_across_exec_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = rand_tensor(&mut rng, &[6, 8, 10, 3], 1.0).cast::<f32>();
    let k = rand_tensor(&mut rng, &[3, 3, 3, 5], 1.0).cast::<f32>();
    let run = |exec| {
        let mut tape = Tape::<f32>::with_exec(exec);
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv2d(xv, kv, (2, 1)).unwrap();
        let s = tape.reshape(y, &[6 * 4 * 10 * 5]).unwrap();
        let n = tape.value(s).len();
        let flat = tape.reshape(s, &[1, n]).unwrap();
        let w = tape.leaf(Tensor::full([n, 1], 0.01));
        let l = tape.linear(flat, w, None).unwrap();
        let l = tape.reshape(l, &[1]).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(y).clone(), g.get(kv).unwrap().clone(), g.get(xv).unwrap().clone())
    };
    assert_eq!(run(crate::Exec::Sequential), run(crate::Exec::Parallel));
}
