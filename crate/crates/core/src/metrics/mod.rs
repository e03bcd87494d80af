//! Trial scoring and detection metrics.

mod io;
mod sweep;

pub use io::{
    parse_scores, parse_trials, read_scores, read_trials, scores_to_string, trials_to_string, write_scores,
    write_trials,
};
pub use sweep::{
    dcf_at, det_points, eer, far_frr, min_dcf, operating_points, probit, DcfResult, DetPoint, OperatingPoint,
};

use crate::encoder::Embedding;
use crate::error::{Error, Result};

/// Decision-cost parameters. Defaults: unit costs, target prior 0.05.
#[derive(Debug, Clone, PartialEq)]
pub struct DcfParams {
    pub c_fr: f64,
    pub c_fa: f64,
    pub p_target: f64,
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { c_fr: 1.0, c_fa: 1.0, p_target: 0.05, normalize: true }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_fr > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("DCF costs must be positive".into()));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidConfig(format!("p_target {} not in (0, 1)", self.p_target)));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn default_cost(&self) -> f64 {
        (self.c_fr * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Per-trial labels and one score column per stream; higher scores mean
/// "more likely the same speaker".
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub streams: Vec<String>,
    /// `scores[stream][trial]`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreSet {
    pub fn new(ids: Vec<String>, labels: Vec<bool>, streams: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { ids, labels, streams, scores };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.ids.len() != n {
            return Err(Error::DimMismatch { left: self.ids.len(), right: n });
        }
        if self.streams.len() != self.scores.len() {
            return Err(Error::DimMismatch { left: self.streams.len(), right: self.scores.len() });
        }
        for col in &self.scores {
            if col.len() != n {
                return Err(Error::DimMismatch { left: col.len(), right: n });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed { what: "scores", msg: "non-finite score".into() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, s: usize) -> &[f64] {
        &self.scores[s]
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.streams.iter().position(|s| s == name)
    }

    /// Single-stream score set with the same trials.
    pub fn with_single(&self, name: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        Self::new(self.ids.clone(), self.labels.clone(), vec![name.into()], vec![scores])
    }
}

/// `sqrt(Σ (a_d - b_d)²)` accumulated in f64.
pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
}

/// Trial score: negated Euclidean distance, so closer pairs score higher.
pub fn trial_score(enroll: &Embedding, test: &Embedding) -> Result<f64> {
    Ok(-euclidean_distance(&enroll.values, &test.values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_cases() {
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(euclidean_distance(&[0.0], &[1.0, 2.0]), Err(Error::DimMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acc = 0.0f64;
        for i in 0..512 {
            let d = a[i] as f64 - b[i] as f64;
            acc += d * d;
        }
        assert!((euclidean_distance(&a, &b).unwrap() - acc.sqrt()).abs() < 1e-9);
        let (ea, eb) = (Embedding::new(a), Embedding::new(b));
        assert_eq!(trial_score(&ea, &eb).unwrap(), -acc.sqrt());
    }

    #[test]
    fn dcf_params_validation() {
        assert!(DcfParams::default().validate().is_ok());
        assert_eq!(DcfParams::default().default_cost(), 0.05);
        assert!(DcfParams { p_target: 1.0, ..Default::default() }.validate().is_err());
        assert!(DcfParams { c_fa: 0.0, ..Default::default() }.validate().is_err());
    }
}
