use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{fuse_columns, fuse_embeddings, FusionWeights, Objective, SearchConfig};
use crate::metrics::{eer, euclidean_distance, min_dcf, ScoreSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    /// Grid indices of `k1` and `k2`; `k_s = i_s · step`.
    pub index: (usize, usize),
    pub weights: FusionWeights,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: FusionWeights,
    pub value: f64,
    pub objective: Objective,
    pub candidates: usize,
    /// Best objective of a single stream, when the single-stream corners are
    /// grid members.
    pub best_single: Option<f64>,
}

/// `(i1, i2)` with `i1, i2 ≥ k_min / step` and `i1 + i2 ≤ 1 / step`, in
/// lexicographic order.
pub fn grid_indices(cfg: &SearchConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let n = cfg.divisions()?;
    let lo = (cfg.k_min * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::new();
    for i1 in lo..=n {
        for i2 in lo..=n - i1 {
            out.push((i1, i2));
        }
    }
    Ok(out)
}

fn weights_at(i1: usize, i2: usize, n: usize) -> FusionWeights {
    let nf = n as f64;
    FusionWeights { k: vec![i1 as f64 / nf, i2 as f64 / nf, (n - i1 - i2) as f64 / nf] }
}

/// The configured objective of one score column.
pub fn objective_value(scores: &[f64], labels: &[bool], cfg: &SearchConfig) -> Result<f64> {
    match cfg.objective {
        Objective::MinDcf => Ok(min_dcf(scores, labels, &cfg.dcf)?.value(&cfg.dcf)),
        Objective::Eer => eer(scores, labels),
    }
}

/// Evaluates `eval` at every grid point, in grid order.
pub fn evaluate_grid<E>(cfg: &SearchConfig, exec: Exec, eval: E) -> Result<Vec<GridPoint>>
where
    E: Fn(&FusionWeights) -> Result<f64> + Sync + Send,
{
    let n = cfg.divisions()?;
    let idx = grid_indices(cfg)?;
    exec.try_map(idx.len(), |j| {
        let (i1, i2) = idx[j];
        let weights = weights_at(i1, i2, n);
        let value = eval(&weights)?;
        Ok(GridPoint { index: (i1, i2), weights, value })
    })
}

/// First point attaining the minimum, i.e. the lexicographically smallest
/// `(k1, k2)` among ties.
fn first_minimum(points: Vec<GridPoint>) -> Result<GridPoint> {
    let mut best: Option<GridPoint> = None;
    for p in points {
        if best.as_ref().is_none_or(|b| p.value < b.value) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("empty weight grid".into()))
}

fn finish(points: Vec<GridPoint>, cfg: &SearchConfig, best_single: Option<f64>) -> Result<SearchResult> {
    let candidates = points.len();
    let best = first_minimum(points)?;
    Ok(SearchResult { weights: best.weights, value: best.value, objective: cfg.objective, candidates, best_single })
}

fn require_three(n: usize) -> Result<()> {
    if n != 3 {
        return Err(Error::DimMismatch { left: n, right: 3 });
    }
    Ok(())
}

/// Exhaustive score-level search over the weight simplex grid.
pub fn search_weights(norm: &ScoreSet, cfg: &SearchConfig, exec: Exec) -> Result<SearchResult> {
    require_three(norm.n_streams())?;
    cfg.validate()?;
    let labels = &norm.labels;
    let points = evaluate_grid(cfg, exec, |k| objective_value(&fuse_columns(&norm.scores, &k.k), labels, cfg))?;
    let best_single = if cfg.k_min == 0.0 {
        let mut best = f64::INFINITY;
        for s in 0..3 {
            best = best.min(objective_value(norm.stream(s), labels, cfg)?);
        }
        Some(best)
    } else {
        None
    };
    finish(points, cfg, best_single)
}

/// Embedding-level search: every candidate fuses the enrollment and test
/// embeddings of each trial and scores them by negated Euclidean distance.
/// `enroll[s][t]` is stream `s`'s enrollment embedding of trial `t`.
pub fn search_embedding_weights(
    enroll: &[Vec<Embedding>],
    test: &[Vec<Embedding>],
    labels: &[bool],
    cfg: &SearchConfig,
    exec: Exec,
) -> Result<SearchResult> {
    require_three(enroll.len())?;
    require_three(test.len())?;
    for col in enroll.iter().chain(test) {
        if col.len() != labels.len() {
            return Err(Error::DimMismatch { left: col.len(), right: labels.len() });
        }
    }
    cfg.validate()?;
    let score_with = |k: &FusionWeights| -> Result<Vec<f64>> {
        (0..labels.len())
            .map(|t| {
                let e = fuse_embeddings(&[&enroll[0][t], &enroll[1][t], &enroll[2][t]], k)?;
                let x = fuse_embeddings(&[&test[0][t], &test[1][t], &test[2][t]], k)?;
                Ok(-euclidean_distance(&e.values, &x.values)?)
            })
            .collect()
    };
    let points = evaluate_grid(cfg, exec, |k| objective_value(&score_with(k)?, labels, cfg))?;
    let best_single = if cfg.k_min == 0.0 {
        let mut best = f64::INFINITY;
        for s in 0..3 {
            best = best.min(objective_value(&score_with(&FusionWeights::corner(s, 3))?, labels, cfg)?);
        }
        Some(best)
    } else {
        None
    };
    finish(points, cfg, best_single)
}
