use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::metrics::Trial;

const NONTARGET_ATTEMPTS: usize = 1000;

/// `n_trials` trials alternating target (even positions) and nontarget
/// (odd positions). Target pairs are drawn without replacement from every
/// same-speaker pair, cycling through fresh permutations if more are needed;
/// nontarget pairs avoid repeats when possible.
pub fn gen_trials(m: &Manifest, n_trials: usize, seed: u64) -> Result<Vec<Trial>> {
    let groups = m.by_speaker();
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!("{} speakers, trials need at least 2", groups.len())));
    }
    let mut target_pairs = Vec::new();
    for (_, idx) in &groups {
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                target_pairs.push((i, j));
            }
        }
    }
    let n_targets = n_trials.div_ceil(2);
    if target_pairs.is_empty() && n_targets > 0 {
        return Err(Error::InsufficientData("no speaker has two utterances".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(n_targets);
    while targets.len() < n_targets {
        let take = (n_targets - targets.len()).min(target_pairs.len());
        targets.extend(sample(&mut rng, target_pairs.len(), take).into_iter().map(|k| target_pairs[k]));
    }

    let path = |i: usize| m.entries()[i].path.clone();
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(n_trials);
    let mut targets = targets.into_iter();
    for t in 0..n_trials {
        if t % 2 == 0 {
            let (i, j) = targets.next().expect("enough target pairs");
            out.push(Trial { target: true, enroll: path(i), test: path(j) });
            continue;
        }
        let mut pick = (0, 0);
        for _ in 0..NONTARGET_ATTEMPTS {
            let s = sample(&mut rng, groups.len(), 2);
            let (ga, gb) = (&groups[s.index(0)].1, &groups[s.index(1)].1);
            pick = (ga[rng.random_range(0..ga.len())], gb[rng.random_range(0..gb.len())]);
            if !used.contains(&pick) {
                break;
            }
        }
        used.insert(pick);
        out.push(Trial { target: false, enroll: path(pick.0), test: path(pick.1) });
    }
    Ok(out)
}
