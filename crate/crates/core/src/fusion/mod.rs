//! Weighted fusion of per-stream embeddings or scores, and the grid search
//! for the fusion weights.

mod search;

pub use search::{
    evaluate_grid, grid_indices, objective_value, search_embedding_weights, search_weights, GridPoint, SearchResult,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::metrics::{DcfParams, ScoreSet};

/// Non-negative stream weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    k: Vec<f64>,
}

impl FusionWeights {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("fusion weights {k:?} must be non-negative")));
        }
        let sum: f64 = k.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("fusion weights {k:?} sum to {sum}")));
        }
        Ok(Self { k })
    }

    /// All weight on stream `s` of `n`.
    pub fn corner(s: usize, n: usize) -> Self {
        Self { k: (0..n).map(|i| if i == s { 1.0 } else { 0.0 }).collect() }
    }

    pub fn uniform(n: usize) -> Self {
        Self { k: vec![1.0 / n as f64; n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    MinDcf,
    Eer,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::MinDcf => "mindcf",
            Objective::Eer => "eer",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mindcf" => Ok(Objective::MinDcf),
            "eer" => Ok(Objective::Eer),
            _ => Err(Error::InvalidConfig(format!("unknown objective {s:?} (mindcf|eer)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub step: f64,
    pub k_min: f64,
    pub objective: Objective,
    pub dcf: DcfParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { step: 0.01, k_min: 0.0, objective: Objective::MinDcf, dcf: DcfParams::default() }
    }
}

impl SearchConfig {
    /// Number of grid steps spanning `[0, 1]`; the step must divide 1.
    pub fn divisions(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::InvalidConfig(format!("step {} not in (0, 1]", self.step)));
        }
        let n = (1.0 / self.step).round();
        if (n * self.step - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("step {} does not divide 1", self.step)));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.divisions()?;
        if !(self.k_min >= 0.0 && self.k_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("k_min {} not in [0, 1]", self.k_min)));
        }
        self.dcf.validate()
    }
}

/// `Σ_s k_s · x_s`.
pub fn fuse_embeddings(xs: &[&Embedding], k: &FusionWeights) -> Result<Embedding> {
    if xs.len() != k.len() {
        return Err(Error::DimMismatch { left: xs.len(), right: k.len() });
    }
    let dim = xs[0].dim();
    if let Some(bad) = xs.iter().find(|x| x.dim() != dim) {
        return Err(Error::DimMismatch { left: bad.dim(), right: dim });
    }
    let values = (0..dim)
        .map(|d| xs.iter().zip(k.as_slice()).map(|(x, &w)| w * x.values[d] as f64).sum::<f64>() as f32)
        .collect();
    Ok(Embedding::new(values))
}

/// Per-stream min-max scaling of the scores to `[0, 1]`.
pub fn normalize_scores(raw: &ScoreSet) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(raw.n_streams());
    for (name, col) in raw.streams.iter().zip(&raw.scores) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::ConstantScores(name.clone()));
        }
        scores.push(col.iter().map(|v| (v - lo) / (hi - lo)).collect());
    }
    ScoreSet::new(raw.ids.clone(), raw.labels.clone(), raw.streams.clone(), scores)
}

/// `Σ_s k_s · score_s` per trial.
pub fn fuse_scores(norm: &ScoreSet, k: &FusionWeights) -> Result<Vec<f64>> {
    if norm.n_streams() != k.len() {
        return Err(Error::DimMismatch { left: norm.n_streams(), right: k.len() });
    }
    Ok(fuse_columns(&norm.scores, k.as_slice()))
}

pub(crate) fn fuse_columns(cols: &[Vec<f64>], k: &[f64]) -> Vec<f64> {
    let n = cols.first().map_or(0, Vec::len);
    (0..n).map(|i| cols.iter().zip(k).fold(0.0, |acc, (c, &w)| acc + w * c[i])).collect()
}

/// `k_fb k_lf k_hf objective_name objective_value`.
pub fn weights_to_string(k: &FusionWeights, objective: Objective, value: f64) -> String {
    let mut parts: Vec<String> = k.as_slice().iter().map(|v| v.to_string()).collect();
    parts.push(objective.to_string());
    parts.push(value.to_string());
    parts.join(" ") + "\n"
}

pub fn parse_weights(text: &str, origin: &Path) -> Result<(FusionWeights, Objective, f64)> {
    let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: 1, msg };
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() < 3 {
        return Err(err("expected weights, objective name and value".into()));
    }
    let (ks, tail) = parts.split_at(parts.len() - 2);
    let k = ks
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| err(format!("invalid weight {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let objective: Objective = tail[0].parse().map_err(|_| err(format!("unknown objective {:?}", tail[0])))?;
    let value: f64 = tail[1].parse().map_err(|_| err(format!("invalid objective value {:?}", tail[1])))?;
    let k = FusionWeights::new(k).map_err(|e| err(e.to_string()))?;
    Ok((k, objective, value))
}

pub fn write_weights(path: impl AsRef<Path>, k: &FusionWeights, objective: Objective, value: f64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights_to_string(k, objective, value)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<(FusionWeights, Objective, f64)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_weights(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::eer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(cols: Vec<Vec<f64>>, labels: Vec<bool>) -> ScoreSet {
        let n = labels.len();
        let names = ["FB", "LF", "HF"][..cols.len()].iter().map(|s| s.to_string()).collect();
        ScoreSet::new((0..n).map(|i| format!("t{i}")).collect(), labels, names, cols).unwrap()
    }

    #[test]
    fn weights_invariants() {
        assert!(FusionWeights::new(vec![0.2, 0.3, 0.5]).is_ok());
        assert!(FusionWeights::new(vec![0.2, 0.3, 0.6]).is_err());
        assert!(FusionWeights::new(vec![-0.1, 0.6, 0.5]).is_err());
        assert_eq!(FusionWeights::corner(1, 3).as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embedding_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<Embedding> =
            (0..3).map(|_| Embedding::new((0..16).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let refs: Vec<&Embedding> = e.iter().collect();
        assert_eq!(fuse_embeddings(&refs, &FusionWeights::corner(0, 3)).unwrap(), e[0]);

        let v = Embedding::new(vec![0.25, -1.5, 3.0]);
        let fused = fuse_embeddings(&[&v, &v, &v], &FusionWeights::uniform(3)).unwrap();
        for (a, b) in fused.values.iter().zip(&v.values) {
            assert!((a - b).abs() < 1e-6);
        }

        let k = FusionWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let fused = fuse_embeddings(&refs, &k).unwrap();
        for d in 0..16 {
            let mut acc = 0.0f64;
            for s in 0..3 {
                acc += k.as_slice()[s] * e[s].values[d] as f64;
            }
            assert!((fused.values[d] as f64 - acc).abs() < 1e-6);
        }
        let short = Embedding::new(vec![1.0]);
        assert!(matches!(fuse_embeddings(&[&e[0], &short, &e[2]], &k), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn normalization() {
        let s = set(vec![vec![-2.0, 0.0, 2.0]], vec![true, false, true]);
        assert_eq!(normalize_scores(&s).unwrap().scores[0], vec![0.0, 0.5, 1.0]);
        let s = set(vec![vec![0.0, 0.25, 1.0]], vec![true, false, true]);
        assert_eq!(normalize_scores(&s).unwrap(), s);
        let s = set(vec![vec![0.3, 0.3, 0.3]], vec![true, false, true]);
        assert!(matches!(normalize_scores(&s), Err(Error::ConstantScores(n)) if n == "FB"));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<bool> = (0..300).map(|i| i % 2 == 0).collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| labels.iter().map(|&l| rng.random_range(-5.0..5.0) + if l { 2.0 } else { 0.0 }).collect())
            .collect();
        let raw = set(cols, labels.clone());
        let norm = normalize_scores(&raw).unwrap();
        for s in 0..3 {
            assert!((eer(norm.stream(s), &labels).unwrap() - eer(raw.stream(s), &labels).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let s = set(cols.clone(), labels.clone());
        assert_eq!(fuse_scores(&s, &FusionWeights::corner(0, 3)).unwrap(), cols[0]);

        let same = set(vec![cols[1].clone(), cols[1].clone(), cols[1].clone()], labels);
        let fused = fuse_scores(&same, &FusionWeights::new(vec![0.1, 0.6, 0.3]).unwrap()).unwrap();
        for (a, b) in fused.iter().zip(&cols[1]) {
            assert!((a - b).abs() < 1e-12);
        }

        let k = [0.37, 0.41, 0.22];
        let fused = fuse_scores(&s, &FusionWeights::new(k.to_vec()).unwrap()).unwrap();
        for i in 0..50 {
            let naive = k[0] * cols[0][i] + k[1] * cols[1][i] + k[2] * cols[2][i];
            assert!((fused[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let k = FusionWeights::new(vec![0.35, 0.2, 0.45]).unwrap();
        let text = weights_to_string(&k, Objective::MinDcf, 0.125);
        assert_eq!(text, "0.35 0.2 0.45 mindcf 0.125\n");
        let (k2, o, v) = parse_weights(&text, Path::new("w")).unwrap();
        assert_eq!((k2, o, v), (k, Objective::MinDcf, 0.125));
        assert!(parse_weights("0.5 0.6 mindcf 0.1", Path::new("w")).is_err());
        assert!(parse_weights("0.5 0.5 dcf 0.1", Path::new("w")).is_err());
    }

    #[test]
    fn step_must_divide_one() {
        assert_eq!(SearchConfig::default().divisions().unwrap(), 100);
        assert_eq!(SearchConfig { step: 0.25, ..Default::default() }.divisions().unwrap(), 4);
        assert!(SearchConfig { step: 0.3, ..Default::default() }.validate().is_err());
        assert!(SearchConfig { step: 0.0, ..Default::default() }.validate().is_err());
    }
}
