//! Central finite-difference gradient checking for graphs built on a
//! [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    /// Central-difference half step.
    pub h: f64,
    /// Seed of the random projection that reduces non-scalar outputs and of
    /// coordinate sampling.
    pub seed: u64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { h: 1e-3, seed: 0, max_coords: None }
    }
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output element contributes to the checked gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    if n == 1 {
        return y;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = Tensor::from_fn([n, 1], |_| rng.random_range(-1.0..1.0));
    let flat = tape.reshape(y, &[1, n]).expect("flatten");
    let w = tape.leaf(w);
    let s = tape.linear(flat, w, None).expect("projection");
    tape.reshape(s, &[1]).expect("scalar")
}

/// Largest difference between analytic and numeric gradients, relative to
/// the largest gradient magnitude of the same input (floored at 1e-8 so
/// inputs with vanishing gradients compare absolutely).
///
/// `build` records the graph on a fresh tape from one leaf per input.
pub fn gradient_error<B>(inputs: &[Tensor<f64>], opts: &CheckOptions, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let l = project(&mut tape, y, opts.seed);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let l = project(&mut tape, y, opts.seed);
    let grads = tape.backward(l).expect("scalar loss");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0ffee);
    let mut worst = 0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; input.len()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.len() => rand::seq::index::sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        let mut pairs = Vec::with_capacity(coords.len());
        let mut scale = 1e-8f64;
        for &j in &coords {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += opts.h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= opts.h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * opts.h);
            scale = scale.max(numeric.abs()).max(analytic[j].abs());
            pairs.push((analytic[j], numeric));
        }
        let err = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_ops_pass() {
        let x = Tensor::new([2, 3], vec![0.3, -0.7, 1.1, 0.2, -0.1, 0.9]).unwrap();
        let w = Tensor::new([3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.1]).unwrap();
        let opts = CheckOptions::default();
        assert!(gradient_error(&[x.clone()], &opts, |t, v| t.tanh(v[0])) < 1e-6);
        let sampled = CheckOptions { max_coords: Some(2), ..opts };
        let err = gradient_error(&[x, w], &sampled, |t, v| {
            let y = t.linear(v[0], v[1], None).unwrap();
            t.tanh(y)
        });
        assert!(err < 1e-6);
    }
}
